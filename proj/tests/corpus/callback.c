#include <stdio.h>
#include <stdlib.h>
#include <string.h>

static int by_length(const void* a, const void* b) {
  const char* x = *(const char* const*)a;
  const char* y = *(const char* const*)b;
  const size_t lx = strlen(x), ly = strlen(y);
  if (lx != ly) return lx < ly ? -1 : 1;
  return strcmp(x, y);
}

static void on_exit_hook(void) { puts("atexit ran"); }

int main(void) {
  const char* words[] = {"pear", "fig", "banana", "kiwi", "apple", "plum", "cherry"};
  qsort(words, 7, sizeof words[0], by_length);
  for (int i = 0; i < 7; ++i) puts(words[i]);
  const char* key = "kiwi";
  const char** hit = bsearch(&key, words, 7, sizeof words[0], by_length);
  printf("found %s\n", hit ? *hit : "nothing");
  atexit(on_exit_hook);
  return 0;
}
