#pragma once

// Built-in machine-code fixtures. Every byte string was produced by GNU as
// from the listing next to it; offsets are region offsets.

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tva/disassemble.hpp"
#include "tva/rewrite.hpp"

namespace tva::testing {

inline std::vector<std::uint8_t> from_hex(std::string_view hex) {
  std::vector<std::uint8_t> out;
  int hi = -1;
  for (char c : hex) {
    int v;
    if (c >= '0' && c <= '9') v = c - '0';
    else if (c >= 'a' && c <= 'f') v = c - 'a' + 10;
    else if (c >= 'A' && c <= 'F') v = c - 'A' + 10;
    else continue;
    if (hi < 0) {
      hi = v;
    } else {
      out.push_back(static_cast<std::uint8_t>(hi << 4 | v));
      hi = -1;
    }
  }
  return out;
}

struct Fixture {
  std::string name;
  std::vector<std::uint8_t> code;
  OffsetSet entry_points;
  // Legal destinations of the fixture's indirect jumps and calls, when the
  // fixture declares them (the soundness oracle needs them).
  std::optional<OffsetSet> indirect_targets;
  // Named offsets used by individual tests.
  std::vector<std::pair<std::string, std::size_t>> labels;

  std::size_t at(std::string_view label) const {
    for (const auto& [n, off] : labels)
      if (n == label) return off;
    throw std::out_of_range("no label " + std::string(label) + " in " + name);
  }
};

// 90 x5
inline Fixture five_nops() { return {"five_nops", from_hex("9090909090"), {0}, OffsetSet{}, {}}; }

// endbr64; ret
inline Fixture endbr_ret() { return {"endbr_ret", from_hex("f30f1efa c3"), {}, OffsetSet{}, {}}; }

// ret; ret; ret
inline Fixture triple_ret() { return {"triple_ret", from_hex("c3c3c3"), {0}, OffsetSet{}, {}}; }

// endbr64; nop; nop; ret; nop x10. Sixteen offsets decode (offset 2, the
// lone 1E, does not); the endbr64-rooted path has 4 instructions.
inline Fixture pruned_path() {
  return {"pruned_path", from_hex("f30f1efa 90 90 c3 90909090909090909090"), {}, OffsetSet{}, {}};
}

// Three endbr64 functions, ten labels reached only by direct jumps and one
// direct call (post-call offset 0x1f).
//   00 a:   endbr64; test edi,edi; je t1; cmp edi,4; jg t2; jmp t3
//   0f t1:  inc eax; jmp t4
//   13 t2:  dec eax; jmp t4
//   17 t3:  add eax,3
//   1a t4:  call c
//   1f      ret
//   20 b:   endbr64; xor eax,eax
//   26 t5:  add eax,edi; cmp eax,100; jl t5; jmp t6
//   2f t6:  jne t7; nop
//   32 t7:  ret
//   33 c:   endbr64; mov ecx,3
//   3c t8:  jmp t9
//   3e t9:  dec ecx; jnz t8; jae t10; ret
//   45 t10: ret
inline Fixture candidates() {
  return {"candidates",
          from_hex("f30f1efa85ff740783ff047f06eb08ffc0eb07ffc8eb0383c003e814000000c3f30f1efa31c001f883f8647cf9"
                   "eb00750190c3f30f1efab903000000eb00ffc975fa7301c3c3"),
          {0},
          OffsetSet{},
          {{"a", 0x00}, {"post_call", 0x1f}, {"b", 0x20}, {"c", 0x33}, {"t1", 0x0f}, {"t2", 0x13},
           {"t3", 0x17}, {"t4", 0x1a}, {"t5", 0x26}, {"t6", 0x2f}, {"t7", 0x32}, {"t8", 0x3c},
           {"t9", 0x3e}, {"t10", 0x45}}};
}

// Function pointers, a direct call, loops and short branches.
//   00 main: endbr64; push rbx
//   05       lea rax,[rip+f1]; call rax
//   0e       lea rbx,[rip+slot]; call [rbx]
//   17       call g
//   1c       mov rdi,3; call [rip+slot]
//   29       pop rbx; ret
//   2b f1:   endbr64; add eax,1; ret
//   33 f2:   endbr64; lea eax,[rdi+rdi]; ret
//   3b g:    xor ecx,ecx
//   3d 1:    inc ecx; cmp ecx,4; jl 1b
//   44       mov rcx,2
//   4b 2:    loop 2b; jrcxz 3f; nop
//   50 3:    test eax,eax; jne 4f; jmp 5f
//   56 4:    add eax,7
//   59 5:    ret
//   5a       nopw (alignment)
//   60 slot: .quad 0xa1, then f3 0f 1e fa c3 cc cc cc (data holding an
//            accidental endbr64 pattern at 0x68)
inline Fixture fnptr() {
  return {"fnptr",
          from_hex("f30f1efa53488d051f000000ffd0488d1d4b000000ff13e81f00000048c7c703000000ff15370000005bc3"
                   "f30f1efa83c001c3f30f1efa8d043fc331c9ffc183f9047cf948c7c102000000e2fee3019085c07502eb03"
                   "83c007c3660f1f440000a100000000000000f30f1efac3cccccc"),
          {0},
          OffsetSet{0x2b, 0x33},
          {{"main", 0x00}, {"f1", 0x2b}, {"f2", 0x33}, {"g", 0x3b}, {"slot", 0x60}, {"data_endbr", 0x68}}};
}

// Jump-table switch with a NOTRACK branch; the cases carry no endbr64.
//   00 dispatch: endbr64; cmp edi,2; ja default
//   09           lea rax,[rip+table]; movsxd rdx,[rax+rdi*4]; add rax,rdx
//   17           notrack jmp rax
//   1a c0:       mov eax,10; ret
//   20 c1:       mov eax,11; ret
//   26 c2:       mov eax,12; jmp out
//   2d default:  mov eax,-1
//   32 out:      ret
//   34 table:    .long c0-table, c1-table, c2-table
inline Fixture notrack_switch() {
  return {"notrack_switch",
          from_hex("f30f1efa83ff027724488d0524000000486314b84801d03effe0b80a000000c3b80b000000c3b80c000000"
                   "eb05b8ffffffffc390e6ffffffecfffffff2ffffff"),
          {0},
          OffsetSet{0x1a, 0x20, 0x26},
          {{"dispatch", 0x00}, {"notrack_jmp", 0x17}, {"c0", 0x1a}, {"c1", 0x20}, {"c2", 0x26}, {"table", 0x34}}};
}

// RIP-relative load, xbegin, hlt, ud2, ret imm16 and trailing data with a
// truncated jmp rel32.
//   00 start:  endbr64; mov rax,[rip+data]; cmp rax,5; jb short; jmp near
//   13 short:  call helper
//   18         hlt; ud2; nop; .byte 8b
//   1d near:   xbegin abort; xend
//   26 abort:  lea rcx,[rip+helper]; jmp rcx
//   2f helper: endbr64; movabs rax,0x1122334455667788; ret 8
//   40 data:   .quad 7; e9 00 00 00
inline Fixture mixed() {
  return {"mixed",
          from_hex("f30f1efa488b05350000004883f8057202eb0ae817000000f40f0b908bc7f8030000000f01d5488d0d0200"
                   "0000ffe1f30f1efa48b88877665544332211c208000700000000000000e9000000"),
          {0},
          OffsetSet{0x2f},
          {{"start", 0x00}, {"short", 0x13}, {"near", 0x1d}, {"abort", 0x26}, {"helper", 0x2f}, {"data", 0x40}}};
}

// One legal (endbr64) and one illegal indirect-jump target.
//   00 dispatch: endbr64; jmp rdi
//   06 legal:    endbr64; mov eax,1; ret
//   10 illegal:  mov eax,2; ret
inline Fixture ibv_targets() {
  return {"ibv_targets", from_hex("f30f1efaffe7f30f1efab801000000c3b802000000c3"), {0}, OffsetSet{0x06},
          {{"dispatch", 0x00}, {"legal", 0x06}, {"illegal", 0x10}}};
}

// Three calls.
//   00 main: endbr64; xor eax,eax; call f; call f; call g; ret
//   16 f:    inc eax; ret
//   19 g:    add eax,2; ret
inline Fixture three_calls() {
  return {"three_calls", from_hex("f30f1efa31c0e80b000000e806000000e804000000c3ffc0c383c002c3"), {0}, OffsetSet{},
          {{"main", 0x00}, {"call1", 0x06}, {"call2", 0x0b}, {"call3", 0x10}, {"ret_main", 0x15}, {"f", 0x16},
           {"ret_f", 0x18}, {"g", 0x19}, {"ret_g", 0x1c}}};
}

// Shadow-stack scenarios.
//   00 balanced: endbr64; call h; add eax,1; ret
//   0d h:        mov eax,41; ret
//   13 corrupt:  endbr64; call v; ret
//   1d v:        lea rax,[rip+evil]; mov [rsp],rax; ret
//   29 evil:     endbr64; mov eax,7; ret
//   33 rec:      endbr64; test rdi,rdi; je 1f; dec rdi; call rec; inc rax; ret
//   48 1:        xor eax,eax; ret
inline Fixture shadow_cases() {
  return {"shadow_cases",
          from_hex("f30f1efae80400000083c001c3b829000000c3f30f1efae801000000c3488d050500000048890424c3f30f1e"
                   "fab807000000c3f30f1efa4885ff740c48ffcfe8efffffff48ffc0c331c0c3"),
          {0x00, 0x13, 0x33},
          OffsetSet{},
          {{"balanced", 0x00}, {"corrupt", 0x13}, {"evil", 0x29}, {"rec", 0x33}}};
}

inline std::vector<Fixture> builtin_fixtures() {
  return {five_nops(),      endbr_ret(), triple_ret(),  pruned_path(),  candidates(),  fnptr(),
          notrack_switch(), mixed(),     ibv_targets(), three_calls(), shadow_cases()};
}

inline RewriteConfig rewrite_config(std::uint64_t new_base, std::uint64_t mapping_table_vaddr,
                                    bool red_zone_safe = false) {
  RewriteConfig c;
  c.new_base = new_base;
  c.mapping_table_vaddr = mapping_table_vaddr;
  c.red_zone_safe = red_zone_safe;
  return c;
}

// Largest built-in fixture; stands in for corpus binaries when no C
// toolchain is available.
inline Fixture largest_fixture() {
  auto all = builtin_fixtures();
  std::size_t best = 0;
  for (std::size_t i = 1; i < all.size(); ++i)
    if (all[i].code.size() > all[best].code.size()) best = i;
  return all[best];
}

// Random buffer biased toward code-like bytes: a mix of uniform bytes and
// fragments of common encodings, so that traversals get long enough to
// exercise the closure rules.
inline std::vector<std::uint8_t> random_code(std::mt19937_64& rng, std::size_t size) {
  static const std::vector<std::vector<std::uint8_t>> pieces = {
      {0xF3, 0x0F, 0x1E, 0xFA}, {0xC3}, {0xE8}, {0xE9}, {0xEB}, {0x74}, {0x0F, 0x85}, {0xFF, 0xD0},
      {0xFF, 0xE0}, {0x3E, 0xFF, 0xE0}, {0x48, 0x8B, 0x05}, {0x90}, {0x55}, {0x48, 0x89, 0xE5}, {0xCC},
      {0xF4}, {0xE2}, {0xE3}};
  std::vector<std::uint8_t> out;
  out.reserve(size);
  while (out.size() < size) {
    const auto r = rng() % 4;
    if (r == 0) {
      const auto& p = pieces[rng() % pieces.size()];
      out.insert(out.end(), p.begin(), p.end());
    } else {
      out.push_back(static_cast<std::uint8_t>(rng()));
    }
  }
  out.resize(size);
  return out;
}

}  // namespace tva::testing
