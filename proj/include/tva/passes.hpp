#pragma once

// Instrumentation passes: shadow stack, indirect-branch validation and
// control-flow tracing. All emitted code preserves every general-purpose
// register. The shadow-stack and validation checks clobber rflags at returns
// and indirect transfers, where no compiled code keeps flags live.

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "tva/error.hpp"
#include "tva/rewrite.hpp"
#include "tva/x86_emit.hpp"

namespace tva {

// Shadow-stack control block, at a fixed address mapped by the runtime:
//   +0  top: address of the most recently pushed entry
//   +8  base of the storage (first entry goes to base + 8)
//   +16 capacity in entries
inline constexpr std::uint64_t kDefaultShadowControlAddress = 0x56790000;
// Trace buffer control word (buffer sink): address of the next free byte.
inline constexpr std::uint64_t kDefaultTraceControlAddress = 0x567a0000;

inline constexpr std::size_t kTraceEventSize = 16;

// One trace record: {old_offset: u64, kind: u32, reserved: u32}, little-endian.
// `kind` is the numeric InstructionKind of the traced instruction.
struct TraceEvent {
  std::uint64_t old_offset = 0;
  std::uint32_t kind = 0;
  std::uint32_t reserved = 0;

  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

inline std::vector<TraceEvent> parse_trace(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kTraceEventSize != 0) fail(ErrorCode::ParseFailure, "trace length is not a multiple of 16");
  std::vector<TraceEvent> out;
  for (std::size_t at = 0; at < bytes.size(); at += kTraceEventSize) {
    TraceEvent e;
    for (int i = 0; i < 8; ++i) e.old_offset |= static_cast<std::uint64_t>(bytes[at + i]) << (8 * i);
    for (int i = 0; i < 4; ++i) e.kind |= static_cast<std::uint32_t>(bytes[at + 8 + i]) << (8 * i);
    for (int i = 0; i < 4; ++i) e.reserved |= static_cast<std::uint32_t>(bytes[at + 12 + i]) << (8 * i);
    out.push_back(e);
  }
  return out;
}

namespace detail {

inline std::int32_t abs32(std::uint64_t address, std::string_view what) {
  if (address > 0x7fffffffu) fail(ErrorCode::Usage, std::string(what) + " must be below 2 GiB");
  return static_cast<std::int32_t>(address);
}

}  // namespace detail

// Pushes the original return address at every call and checks it at every
// return whose return address lies in the original region. Returns into
// other code (libraries calling back into the program) are not checked:
// their calls were never recorded. A mismatch executes ud2 (SIGILL), an
// illegal transfer through the mapping executes hlt (SIGSEGV), so the two
// violations are distinguishable.
class ShadowStackPass final : public InstrumentationPass {
 public:
  explicit ShadowStackPass(std::uint64_t control_address = kDefaultShadowControlAddress)
      : control_(control_address) {
    detail::abs32(control_address + 8, "shadow stack control address");
  }

  std::string name() const override { return "shadow-stack"; }
  std::uint64_t control_address() const { return control_; }

  PassOutput instrument(const PassContext& ctx) const override {
    using namespace x86;
    const auto kind = ctx.insn.kind;
    const auto cw = Mem::absolute(control_);
    PassOutput out;
    if (kind == InstructionKind::DirectCall || kind == InstructionKind::IndirectCall) {
      if (const auto* ind = ctx.insn.indirect(); ind && ind->far) return out;
      Assembler a(ctx.new_vaddr);
      a.mov(Mem::at(rsp, -80), rax);
      a.mov(Mem::at(rsp, -88), rcx);
      a.lea(rax, Mem::rip_to(ctx.old_vaddr + ctx.insn.length));
      a.mov(rcx, cw);
      a.lea(rcx, Mem::at(rcx, 8));
      a.mov(Mem::at(rcx), rax);
      a.mov(cw, rcx);
      a.mov(rcx, Mem::at(rsp, -88));
      a.mov(rax, Mem::at(rsp, -80));
      out.prologue = a.finish();
    } else if (kind == InstructionKind::Return && !ctx.insn.far_return) {
      Assembler a(ctx.new_vaddr);
      auto skip = a.new_label();
      auto ok = a.new_label();
      a.mov(Mem::at(rsp, -80), rax);
      a.mov(Mem::at(rsp, -88), rcx);
      a.mov(rax, Mem::at(rsp));
      a.lea(rcx, Mem::rip_to(ctx.old_base));
      a.sub(rax, rcx);
      a.cmp(rax, static_cast<std::int32_t>(ctx.old_size));
      a.jcc(Cond::AE, skip);
      a.mov(rcx, cw);
      a.mov(rax, Mem::at(rcx));
      a.cmp(rax, Mem::at(rsp));
      a.jcc(Cond::E, ok);
      a.ud2();
      a.bind(ok);
      a.lea(rcx, Mem::at(rcx, -8));
      a.mov(cw, rcx);
      a.bind(skip);
      a.mov(rcx, Mem::at(rsp, -88));
      a.mov(rax, Mem::at(rsp, -80));
      out.prologue = a.finish();
    }
    return out;
  }

 private:
  std::uint64_t control_;
};

// Superset mode only: before every indirect jump or call that is not
// NOTRACK, checks that a target inside the original region starts with
// endbr64 (read from the original text, which stays readable) and halts
// otherwise. Targets outside the region pass unchecked. In CET-guided mode
// the mapping already halts on non-candidate targets, so the pass emits
// nothing.
class IbvPass final : public InstrumentationPass {
 public:
  std::string name() const override { return "ibv"; }

  PassOutput instrument(const PassContext& ctx) const override {
    using namespace x86;
    PassOutput out;
    if (ctx.mode != DisassemblyMode::Superset) return out;
    const auto kind = ctx.insn.kind;
    if (kind != InstructionKind::IndirectJump && kind != InstructionKind::IndirectCall) return out;
    const auto* ind = ctx.insn.indirect();
    if (ind->far || ind->notrack) return out;
    // The translation of such an instruction is a trap already.
    if (!rip_operand_reachable(ctx.insn, ctx.old_vaddr, ctx.new_vaddr, kExpansionSlack)) return out;
    const std::int32_t b = ctx.red_zone_bias;
    Assembler a(ctx.new_vaddr);
    auto skip = a.new_label();
    auto bad = a.new_label();
    auto over = a.new_label();
    if (b) a.adjust_rsp(-b);
    a.mov(Mem::at(rsp, -80), rax);
    a.mov(Mem::at(rsp, -88), rcx);
    a.raw(materialize_operand(ctx.code, ctx.insn, ctx.old_vaddr, a.here(), b));
    a.lea(rcx, Mem::rip_to(ctx.old_base));
    a.sub(rax, rcx);
    a.cmp(rax, static_cast<std::int32_t>(ctx.old_size));
    a.jcc(Cond::AE, skip);
    if (ctx.old_size < 4) {
      a.jmp(bad);
    } else {
      a.cmp(rax, static_cast<std::int32_t>(ctx.old_size - 4));
      a.jcc(Cond::A, bad);
    }
    a.cmp32(Mem::indexed(rcx, rax, 1), 0xFA1E0FF3u);
    a.jcc(Cond::NE, bad);
    a.bind(skip);
    a.mov(rcx, Mem::at(rsp, -88));
    a.mov(rax, Mem::at(rsp, -80));
    if (b) a.adjust_rsp(b);
    a.jmp(over);
    a.bind(bad);
    a.hlt();
    a.bind(over);
    out.prologue = a.finish();
    return out;
  }
};

struct TraceFdSink {
  int fd = 2;
};
struct TraceBufferSink {
  std::uint64_t control_address = kDefaultTraceControlAddress;
};
using TraceSink = std::variant<TraceFdSink, TraceBufferSink>;

// Emits one TraceEvent before every call, return and indirect jump. The fd
// sink issues a write(2) per event; the buffer sink appends to the buffer
// whose cursor lives at the control address. Both step 128 bytes below rsp
// first so the program's red zone survives.
class TracePass final : public InstrumentationPass {
 public:
  explicit TracePass(TraceSink sink = TraceFdSink{}) : sink_(sink) {
    if (const auto* b = std::get_if<TraceBufferSink>(&sink_)) detail::abs32(b->control_address, "trace control address");
  }

  std::string name() const override { return "trace"; }

  static bool traced(const DecodedInstruction& insn) {
    return is_call(insn.kind) || insn.kind == InstructionKind::Return || insn.kind == InstructionKind::IndirectJump;
  }

  PassOutput instrument(const PassContext& ctx) const override {
    using namespace x86;
    PassOutput out;
    if (!traced(ctx.insn)) return out;
    const auto off = static_cast<std::int32_t>(ctx.insn.offset);
    const auto kind = static_cast<std::int32_t>(ctx.insn.kind);
    Assembler a(ctx.new_vaddr);
    a.adjust_rsp(-128);
    if (const auto* fd = std::get_if<TraceFdSink>(&sink_)) {
      for (Reg r : {rax, rcx, rdx, rsi, rdi, r11}) a.push(r);
      a.push_imm(kind);
      a.push_imm(off);
      a.mov32(rax, 1);  // write
      a.mov32(rdi, static_cast<std::uint32_t>(fd->fd));
      a.mov(rsi, rsp);
      a.mov32(rdx, static_cast<std::uint32_t>(kTraceEventSize));
      a.syscall();
      a.adjust_rsp(16);
      for (Reg r : {r11, rdi, rsi, rdx, rcx, rax}) a.pop(r);
    } else {
      const auto& b = std::get<TraceBufferSink>(sink_);
      const auto cw = Mem::absolute(b.control_address);
      a.push(rax);
      a.mov(rax, cw);
      a.mov_imm(Mem::at(rax), off);
      a.mov_imm(Mem::at(rax, 8), kind);
      a.lea(rax, Mem::at(rax, 16));
      a.mov(cw, rax);
      a.pop(rax);
    }
    a.adjust_rsp(128);
    out.prologue = a.finish();
    return out;
  }

 private:
  TraceSink sink_;
};

struct PassOptions {
  std::uint64_t shadow_control_address = kDefaultShadowControlAddress;
  TraceSink trace_sink = TraceFdSink{};
};

inline constexpr std::string_view kPassNames[] = {"null", "trace", "shadow-stack", "ibv"};

inline std::shared_ptr<const InstrumentationPass> make_pass(std::string_view name, const PassOptions& opt = {}) {
  if (name == "null") return std::make_shared<NullPass>();
  if (name == "trace") return std::make_shared<TracePass>(opt.trace_sink);
  if (name == "shadow-stack") return std::make_shared<ShadowStackPass>(opt.shadow_control_address);
  if (name == "ibv") return std::make_shared<IbvPass>();
  fail(ErrorCode::Usage, "unknown pass '" + std::string(name) + "' (expected null, trace, shadow-stack, ibv)");
}

}  // namespace tva
