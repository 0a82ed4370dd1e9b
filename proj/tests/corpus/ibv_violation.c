#include <stdio.h>
#include <stdlib.h>

__attribute__((noinline)) void target(void) {
  puts("reached");
  fflush(stdout);
  exit(0);
}

int main(int argc, char** argv) {
  (void)argv;
  puts("start");
  fflush(stdout);
  // Skip the 4-byte endbr64 at the start of target: a legal transfer under
  // no hardware CET, an illegal one for a CET-guided mapping.
  void (*volatile p)(void) = (void (*)(void))((char*)target + 4 * argc);
  p();
  return 1;
}
