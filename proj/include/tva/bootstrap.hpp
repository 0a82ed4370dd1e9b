#pragma once

// Startup code placed at the rewritten entry point. It runs before any
// rewritten instruction:
//  1. maps the runtime state page at a fixed address; if that page already
//     exists the process was initialized before and steps 2-4 are skipped;
//  2. for PIE inputs, copies the region table to its fixed address and adds
//     the load bias to the non-external entries and the global lookup slot;
//  3. allocates shadow-stack storage when the shadow-stack pass is in use;
//  4. installs the SIGSEGV handler that redirects execution attempts in the
//     original (now non-executable) text into the rewritten code;
//  5. restores rdx (the loader's fini callback) and jumps to the rewritten
//     original entry point.
//
// The SIGSEGV handler translates the faulting rip through the mapping
// table. A mapped address resumes in new code; if the shadow stack's top
// equals that address (a library returning into the program) the entry is
// popped. An unmapped address resumes at the hlt trap, which faults again
// outside the original text. Faults outside the original text restore the
// default disposition and return, so the fault repeats and kills the
// process as it would have without the runtime.

#include <cstdint>
#include <vector>

#include "tva/address_map.hpp"
#include "tva/error.hpp"
#include "tva/x86_emit.hpp"

namespace tva {

// Exit status when the runtime cannot map its fixed pages or storage.
inline constexpr int kStartupFailureExit = 120;

// Runtime state page layout (shadow-stack control block first, so the
// shadow-stack pass control address equals the state page address).
inline constexpr std::uint64_t kStateShadowTop = 0x00;
inline constexpr std::uint64_t kStateShadowBase = 0x08;
inline constexpr std::uint64_t kStateShadowCapacity = 0x10;
inline constexpr std::uint64_t kStatePageSize = 0x1000;

struct BootstrapParams {
  std::uint64_t vaddr = 0;  // link address of the bootstrap code
  bool is_pie = false;
  std::uint64_t old_base = 0;
  std::uint64_t old_size = 0;
  std::uint64_t new_base = 0;
  std::uint64_t mapping_vaddr = 0;
  std::uint64_t trap_vaddr = 0;
  std::uint64_t entry_new = 0;  // link address of the translated entry point
  RegionTable regions;          // as linked; table_address is where it must live
  std::uint64_t table_link_vaddr = 0;
  std::uint64_t state_address = 0;
  bool shadow_stack = false;
  std::uint64_t shadow_capacity = 65536;  // entries
  bool fault_handler = true;
};

namespace detail {

constexpr std::int32_t kSysMmap = 9, kSysMprotect = 10, kSysRtSigaction = 13, kSysRtSigreturn = 15,
                       kSysExitGroup = 231;
constexpr std::int32_t kProtRead = 1, kProtRw = 3;
constexpr std::int32_t kMapPrivateAnon = 0x22, kMapFixedNoReplace = 0x100000, kMapNoReserve = 0x4000;
constexpr std::int32_t kEexist = 17;
constexpr std::int32_t kSigsegv = 11;
constexpr std::int64_t kSaSiginfo = 4, kSaRestorer = 0x04000000;
constexpr std::int32_t kUcontextRip = 168;  // offsetof(ucontext_t, uc_mcontext.gregs[REG_RIP])

}  // namespace detail

inline std::vector<std::uint8_t> build_bootstrap(const BootstrapParams& p) {
  using namespace x86;
  using namespace detail;
  if (p.state_address > 0x7fffffffu || p.regions.table_address > 0x7fffffffu)
    fail(ErrorCode::Usage, "runtime fixed addresses must be below 2 GiB");
  Assembler a(p.vaddr);
  auto startup_fail = a.new_label();
  auto already = a.new_label();
  auto handler = a.new_label();
  auto restorer = a.new_label();

  auto sys = [&](std::int32_t nr) {
    a.mov32(rax, static_cast<std::uint32_t>(nr));
    a.syscall();
  };
  auto mmap_fixed = [&](std::uint64_t addr, std::uint64_t len, std::int32_t prot) {
    a.mov_imm(rdi, static_cast<std::int32_t>(addr));
    a.mov_imm(rsi, static_cast<std::int32_t>(len));
    a.mov32(rdx, static_cast<std::uint32_t>(prot));
    a.mov32(r10, static_cast<std::uint32_t>(kMapPrivateAnon | kMapFixedNoReplace));
    a.mov_imm(r8, -1);
    a.xor_(r9, r9);
    sys(kSysMmap);
  };

  a.push(rdx);

  // 1. state page, doubling as the initialization guard
  mmap_fixed(p.state_address, kStatePageSize, kProtRw);
  a.cmp(rax, -kEexist);
  a.jcc(Cond::E, already);
  a.cmp(rax, static_cast<std::int32_t>(p.state_address));
  a.jcc(Cond::NE, startup_fail);

  // 2. region table at its fixed address
  if (p.is_pie) {
    const std::uint64_t page = p.regions.table_address & ~std::uint64_t{0xfff};
    const std::uint64_t len = ((p.regions.table_address + p.regions.byte_size() + 0xfff) & ~std::uint64_t{0xfff}) - page;
    mmap_fixed(page, len, kProtRw);
    a.cmp(rax, static_cast<std::int32_t>(page));
    a.jcc(Cond::NE, startup_fail);
    // r12 = load bias
    a.lea(r12, Mem::rip_to(p.vaddr));
    a.sub(r12, static_cast<std::int32_t>(p.vaddr));
    a.lea(rsi, Mem::rip_to(p.table_link_vaddr));
    a.mov_imm(rdi, static_cast<std::int32_t>(p.regions.table_address));
    a.mov_imm(rcx, static_cast<std::int32_t>(p.regions.byte_size()));
    a.raw({0xF3, 0xA4});  // rep movsb
    auto relocate = [&](std::uint64_t field) {
      a.mov(rax, Mem::absolute(field));
      a.add(rax, r12);
      a.mov(Mem::absolute(field), rax);
    };
    relocate(p.regions.table_address + 8);
    for (std::size_t i = 0; i < p.regions.entries.size(); ++i) {
      if (p.regions.entries[i].external()) continue;
      const std::uint64_t at = p.regions.table_address + kRegionTableHeaderSize + kRegionEntrySize * i;
      relocate(at);
      relocate(at + 8);
    }
    a.mov_imm(rdi, static_cast<std::int32_t>(page));
    a.mov_imm(rsi, static_cast<std::int32_t>(len));
    a.mov32(rdx, kProtRead);
    sys(kSysMprotect);
  }

  // 3. shadow-stack storage with a guard page above it
  if (p.shadow_stack) {
    const std::uint64_t bytes = ((p.shadow_capacity + 1) * 8 + 0xfff) & ~std::uint64_t{0xfff};
    a.xor_(rdi, rdi);
    a.mov_imm(rsi, static_cast<std::int32_t>(bytes + 0x1000));
    a.mov32(rdx, kProtRw);
    a.mov32(r10, static_cast<std::uint32_t>(kMapPrivateAnon | kMapNoReserve));
    a.mov_imm(r8, -1);
    a.xor_(r9, r9);
    sys(kSysMmap);
    a.cmp(rax, -4096);
    a.jcc(Cond::AE, startup_fail);
    a.mov(Mem::absolute(p.state_address + kStateShadowTop), rax);
    a.mov(Mem::absolute(p.state_address + kStateShadowBase), rax);
    a.mov_imm(Mem::absolute(p.state_address + kStateShadowCapacity), static_cast<std::int32_t>(p.shadow_capacity));
    a.lea(rdi, Mem::at(rax, static_cast<std::int64_t>(bytes)));
    a.mov_imm(rsi, 0x1000);
    a.xor_(rdx, rdx);
    sys(kSysMprotect);
  }

  // 4. fault handler
  if (p.fault_handler) {
    a.sub(rsp, 32);
    a.lea(rax, Mem::rip_to(handler));
    a.mov(Mem::at(rsp), rax);
    a.mov_imm(Mem::at(rsp, 8), static_cast<std::int32_t>(kSaSiginfo | kSaRestorer));
    a.lea(rax, Mem::rip_to(restorer));
    a.mov(Mem::at(rsp, 16), rax);
    a.mov_imm(Mem::at(rsp, 24), 0);
    a.mov32(rdi, kSigsegv);
    a.mov(rsi, rsp);
    a.xor_(rdx, rdx);
    a.mov32(r10, 8);
    sys(kSysRtSigaction);
    a.add(rsp, 32);
    a.test(rax, rax);
    a.jcc(Cond::NE, startup_fail);
  }

  // 5. enter the program
  a.bind(already);
  a.pop(rdx);
  a.jmp_abs(p.entry_new);

  a.bind(startup_fail);
  a.mov32(rdi, static_cast<std::uint32_t>(kStartupFailureExit));
  sys(kSysExitGroup);
  a.hlt();

  if (p.fault_handler) {
    // handler(sig = rdi, info = rsi, uc = rdx); every register is restored
    // from uc on sigreturn, so scratch use is unrestricted.
    auto outside = a.new_label();
    auto mapped = a.new_label();
    auto set_rip = a.new_label();
    a.bind(handler);
    a.mov(rax, Mem::at(rdx, kUcontextRip));
    a.lea(rcx, Mem::rip_to(p.old_base));
    a.mov(rsi, rax);
    a.sub(rsi, rcx);
    a.cmp(rsi, static_cast<std::int32_t>(p.old_size));
    a.jcc(Cond::AE, outside);
    a.lea(r8, Mem::rip_to(p.mapping_vaddr));
    a.mov32(rcx, Mem::indexed(r8, rsi, 4));
    a.cmp32(rcx, -1);
    a.jcc(Cond::NE, mapped);
    a.lea(rcx, Mem::rip_to(p.trap_vaddr));
    a.jmp(set_rip);
    a.bind(mapped);
    a.lea(r8, Mem::rip_to(p.new_base));
    a.add(rcx, r8);
    if (p.shadow_stack) {
      a.mov(r9, Mem::absolute(p.state_address + kStateShadowTop));
      a.cmp(rax, Mem::at(r9));
      a.jcc(Cond::NE, set_rip);
      a.lea(r9, Mem::at(r9, -8));
      a.mov(Mem::absolute(p.state_address + kStateShadowTop), r9);
    }
    a.bind(set_rip);
    a.mov(Mem::at(rdx, kUcontextRip), rcx);
    a.ret();

    a.bind(outside);
    a.sub(rsp, 32);
    a.mov_imm(Mem::at(rsp), 0);
    a.mov_imm(Mem::at(rsp, 8), 0);
    a.mov_imm(Mem::at(rsp, 16), 0);
    a.mov_imm(Mem::at(rsp, 24), 0);
    a.mov32(rdi, kSigsegv);
    a.mov(rsi, rsp);
    a.xor_(rdx, rdx);
    a.mov32(r10, 8);
    sys(kSysRtSigaction);
    a.add(rsp, 32);
    a.ret();

    a.bind(restorer);
    sys(kSysRtSigreturn);
    a.hlt();
  }
  return a.finish();
}

}  // namespace tva
