#pragma once

// Pass two of the pipeline: lay out every disassembled instruction in a new
// text region, retarget direct branches, replace indirect transfers with
// lookup trampolines and run the instrumentation passes.
//
// Translation of each instruction kind:
//  * Other, Endbr64, Halt: copied; a RIP-relative displacement is adjusted so
//    it still reaches the original address.
//  * DirectJump / ConditionalJump: re-encoded with a rel32 immediate. loop,
//    loopcc and jrcxz have no rel32 form and become `Ex 02; jmp +5; jmp rel32`.
//  * DirectCall: `push rbx; lea rbx,[orig_ret]; xchg rbx,[rsp]; jmp target`,
//    so the callee sees the original return address, exactly like the call
//    trampoline does.
//  * IndirectJump / IndirectCall / Return: trampolines that translate the
//    target through the local lookup.
//  * Far indirect transfers and far returns cannot be translated and are
//    replaced by hlt.
// A non-terminating instruction whose successor is not laid out next gets a
// trailing `jmp rel32` to it, or hlt when the successor is not code.
// Instructions whose RIP-relative operand cannot reach the original address
// from the new text (only decodes of non-code bytes do that) become hlt.

#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tva/address_map.hpp"
#include "tva/disassemble.hpp"
#include "tva/error.hpp"
#include "tva/x86_emit.hpp"

namespace tva {

enum class StubTemplate : std::uint8_t { IndirectJump, IndirectCall, Return };

constexpr std::string_view to_string(StubTemplate t) {
  switch (t) {
    case StubTemplate::IndirectJump: return "IndirectJump";
    case StubTemplate::IndirectCall: return "IndirectCall";
    case StubTemplate::Return: return "Return";
  }
  return "?";
}

// Bytes skipped below rsp by the red-zone-safe jump trampoline.
inline constexpr std::int32_t kRedZoneBias = 128;

struct RewriteConfig {
  std::uint64_t new_base = 0;             // link address of the new text
  std::uint64_t mapping_table_vaddr = 0;  // link address of the serialized mapping
  std::uint64_t table_address = kDefaultTableAddress;
  // Indirect jumps move rsp past the red zone before using scratch slots.
  // Calls and returns need no such care: the red zone is dead across them.
  bool red_zone_safe = false;
  // Regions appended to the registry after the rewritten one, typically an
  // external catch-all {0, 0, 2^64-1}.
  std::vector<RegionEntry> extra_regions;
};

// --- instrumentation passes ---

struct PassContext {
  const DecodedInstruction& insn;
  std::span<const std::uint8_t> code;  // original region bytes
  std::uint64_t old_base = 0;
  std::size_t old_size = 0;
  std::uint64_t old_vaddr = 0;  // link address of the original instruction
  std::uint64_t new_vaddr = 0;  // link address where this pass's prologue starts
  DisassemblyMode mode = DisassemblyMode::Superset;
  // Extra distance below rsp that scratch slots must keep (red-zone-safe
  // indirect jumps); 0 otherwise.
  std::int32_t red_zone_bias = 0;
};

// Prologue bytes go in front of the translated instruction, epilogue bytes
// after it. A replacement supersedes the translation; when several passes
// return one, the last pass wins. Prologue bytes may depend on
// PassContext::new_vaddr; epilogues and replacements must be
// position-independent. All three must have address-independent sizes.
struct PassOutput {
  std::optional<std::vector<std::uint8_t>> prologue;
  std::optional<std::vector<std::uint8_t>> replacement;
  std::optional<std::vector<std::uint8_t>> epilogue;
};

class InstrumentationPass {
 public:
  virtual ~InstrumentationPass() = default;
  virtual std::string name() const = 0;
  virtual PassOutput instrument(const PassContext& ctx) const = 0;
};

using PassList = std::vector<std::shared_ptr<const InstrumentationPass>>;

class NullPass final : public InstrumentationPass {
 public:
  std::string name() const override { return "null"; }
  PassOutput instrument(const PassContext&) const override { return {}; }
};

inline std::shared_ptr<const InstrumentationPass> null_pass() { return std::make_shared<NullPass>(); }

// --- operand materialization ---

// Encodes `mov rax, <operand>` for the target operand of an indirect
// jmp/call (FF /2, FF /4) placed at `at_vaddr`. Register operands become a
// register move. Memory operands keep their segment override, address-size
// prefix, base, index, scale and displacement; RIP-relative displacements
// are rebased so they reach the original location, and rsp-based operands
// are adjusted by `rsp_bias` when rsp has been moved. Other prefixes (66,
// F2 bnd, 3E notrack) do not affect the loaded value and are dropped.
// UnsupportedOperand: a rebased RIP displacement beyond rel32, or an
// EIP-relative (67-prefixed RIP) operand.
inline std::vector<std::uint8_t> materialize_operand(std::span<const std::uint8_t> code,
                                                     const DecodedInstruction& insn, std::uint64_t old_vaddr,
                                                     std::uint64_t at_vaddr, std::int32_t rsp_bias = 0) {
  const EncodingLayout& L = insn.layout;
  if (!L.has_modrm) fail(ErrorCode::UnsupportedOperand, "indirect branch without ModRM");
  std::vector<std::uint8_t> out;
  if (L.mod() == 3) {
    const int src = L.rm() | ((L.rex & 1) ? 8 : 0);
    if (src == x86::rsp && rsp_bias != 0) {
      // lea rax, [rsp+bias]
      out = {0x48, 0x8D, 0x84, 0x24};
      for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(rsp_bias >> (8 * i)));
      return out;
    }
    out = {static_cast<std::uint8_t>(0x48 | ((src & 8) ? 4 : 0)), 0x89,
           static_cast<std::uint8_t>(0xC0 | ((src & 7) << 3))};
    return out;
  }
  const std::uint8_t* bytes = code.data() + insn.offset;
  if (L.address_size) out.push_back(0x67);
  if (L.segment) out.push_back(L.segment);
  out.push_back(static_cast<std::uint8_t>(0x48 | (L.rex & 3)));
  out.push_back(0x8B);
  const bool rip = L.mod() == 0 && L.rm() == 5;
  const bool rsp_base = L.rm() == 4 && L.has_sib && (L.sib & 7) == 4 && !(L.rex & 1) &&
                        !(L.mod() == 0 && (L.sib & 7) == 5);
  std::int64_t disp = 0;
  if (L.disp_size) disp = detail::read_signed(bytes + L.disp_offset, L.disp_size);
  if (rip) {
    if (L.address_size) fail(ErrorCode::UnsupportedOperand, "EIP-relative indirect branch operand");
    out.push_back(0x05);
    const std::uint64_t target = old_vaddr + insn.length + static_cast<std::uint64_t>(disp);
    const std::uint64_t end = at_vaddr + out.size() + 4;
    const std::int64_t nd = static_cast<std::int64_t>(target - end);
    if (!x86::fits_i32(nd)) fail(ErrorCode::UnsupportedOperand, "rebased RIP displacement beyond rel32");
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(nd >> (8 * i)));
    return out;
  }
  if (rsp_base && rsp_bias != 0) {
    const std::int64_t nd = disp + rsp_bias;
    if (!x86::fits_i32(nd)) fail(ErrorCode::UnsupportedOperand, "rsp displacement beyond disp32");
    out.push_back(static_cast<std::uint8_t>(0x80 | 0x04));
    out.push_back(L.sib);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(nd >> (8 * i)));
    return out;
  }
  out.push_back(static_cast<std::uint8_t>(L.modrm & 0xC7));
  if (L.has_sib) out.push_back(L.sib);
  for (std::uint8_t i = 0; i < L.disp_size; ++i) out.push_back(bytes[L.disp_offset + i]);
  return out;
}

// True when the RIP-relative operand of `insn` (if any) can still reach its
// original address from code placed near `at_vaddr`. `slack` widens the
// check for operands that end up somewhere inside a longer expansion.
// EIP-relative (67-prefixed) operands are never considered reachable.
inline bool rip_operand_reachable(const DecodedInstruction& insn, std::uint64_t old_vaddr, std::uint64_t at_vaddr,
                                  std::int64_t slack = 0) {
  if (!insn.rip_operand) return true;
  if (insn.layout.address_size) return false;
  const std::uint64_t target =
      old_vaddr + insn.length + static_cast<std::uint64_t>(std::int64_t{insn.rip_operand->displacement_value});
  const auto nd = static_cast<std::int64_t>(target - (at_vaddr + insn.length));
  return x86::fits_i32(nd - slack) && x86::fits_i32(nd + slack);
}

// Slack used for operands materialized inside trampolines and pass code.
inline constexpr std::int64_t kExpansionSlack = 4096;

// --- trampolines ---

struct StubExpansion {
  std::vector<std::uint8_t> bytes;
  std::vector<x86::StackEffect> effects;
  std::size_t lookup_call_field = 0;  // offset of the rel32 of `call lookup`
};

// Expands one trampoline at `at_vaddr`. `insn`/`code`/`old_vaddr` describe
// the original instruction; `lookup_vaddr` is the local lookup stub.
//
// Slot use, relative to the rsp at trampoline entry (S):
//  jump:   rax -> S-64, rbx -> S-72, destination -> S-8
//  call:   rax -> S-64, rbx -> S-72; the original return address is pushed
//          to S-8, the destination goes to S-16 and the saved registers are
//          read back as [rsp-56] / [rsp-64]
//  return: rax -> S-56; after the return address is popped, rbx is pushed
//          into its slot, the destination goes to S and rax is read back
//          as [rsp-64] once rsp = S+8
inline StubExpansion expand_stub(StubTemplate t, const DecodedInstruction& insn, std::span<const std::uint8_t> code,
                                 std::uint64_t old_vaddr, std::uint64_t at_vaddr, std::uint64_t lookup_vaddr,
                                 std::int32_t red_zone_bias = 0) {
  using namespace x86;
  Assembler a(at_vaddr);
  StubExpansion out;
  auto lookup_call = [&] {
    a.call_abs(lookup_vaddr, true);
    out.lookup_call_field = a.size() - 4;
  };
  switch (t) {
    case StubTemplate::IndirectJump: {
      const std::int32_t b = red_zone_bias;
      if (b) a.adjust_rsp(-b);
      a.mov(Mem::at(rsp, -64), rax);
      a.mov(Mem::at(rsp, -72), rbx);
      a.raw(materialize_operand(code, insn, old_vaddr, a.here(), b));
      a.mov32(rbx, 0);
      lookup_call();
      a.mov(Mem::at(rsp, -8), rax);
      a.mov(rax, Mem::at(rsp, -64));
      a.mov(rbx, Mem::at(rsp, -72));
      if (b) a.adjust_rsp(b);
      a.jmp(Mem::at(rsp, -8 - b));
      break;
    }
    case StubTemplate::IndirectCall: {
      a.mov(Mem::at(rsp, -64), rax);
      a.mov(Mem::at(rsp, -72), rbx);
      a.raw(materialize_operand(code, insn, old_vaddr, a.here(), 0));
      a.mov32(rbx, 1);
      a.push(rbx);
      a.lea(rbx, Mem::rip_to(old_vaddr + insn.length));
      a.xchg(rbx, Mem::at(rsp));
      lookup_call();
      a.mov(Mem::at(rsp, -8), rax);
      a.mov(rax, Mem::at(rsp, -56));
      a.mov(rbx, Mem::at(rsp, -64));
      a.jmp(Mem::at(rsp, -8));
      break;
    }
    case StubTemplate::Return: {
      const std::int32_t pop = insn.return_pop;
      a.mov(Mem::at(rsp, -56), rax);
      a.pop(rax);
      a.push(rbx);
      a.mov32(rbx, 0);
      lookup_call();
      a.pop(rbx);
      a.mov(Mem::at(rsp, -8), rax);
      a.mov(rax, Mem::at(rsp, -64));
      if (pop) a.adjust_rsp(pop);
      a.jmp(Mem::at(rsp, -8 - pop));
      break;
    }
  }
  out.effects = a.effects();
  out.bytes = a.finish();
  return out;
}

// --- stack-slot discipline ---

struct SlotViolation {
  std::size_t at;     // byte offset of the offending instruction
  std::int64_t slot;  // address relative to the entry rsp
  std::string what;
};

// Walks the stack effects of one expansion. Any read below the entry rsp
// must hit bytes written earlier in the same expansion and not clobbered by
// an intervening lookup call since. Reads at or above the entry rsp belong
// to the program and are always allowed. An unknown flag value is treated as
// "set" (the larger clobber set).
inline std::vector<SlotViolation> check_stack_slot_discipline(const std::vector<x86::StackEffect>& effects) {
  using K = x86::StackEffect::Kind;
  std::vector<SlotViolation> v;
  std::set<std::int64_t> written;
  std::int64_t cur = 0;
  std::optional<std::int64_t> flag;
  auto mark = [&](std::int64_t addr) {
    for (int i = 0; i < 8; ++i) written.insert(addr + i);
  };
  auto check = [&](std::int64_t addr, std::size_t at, const char* what) {
    if (addr >= 0) return;
    for (int i = 0; i < 8; ++i)
      if (!written.count(addr + i)) {
        v.push_back({at, addr, what});
        return;
      }
  };
  for (const auto& e : effects) {
    switch (e.kind) {
      case K::Write: mark(cur + e.disp); break;
      case K::Read: check(cur + e.disp, e.at, "read of an unwritten or clobbered slot"); break;
      case K::ReadWrite:
        check(cur + e.disp, e.at, "exchange with an unwritten or clobbered slot");
        mark(cur + e.disp);
        break;
      case K::Push:
        cur -= 8;
        mark(cur);
        break;
      case K::Pop:
        check(cur, e.at, "pop of an unwritten or clobbered slot");
        cur += 8;
        break;
      case K::AdjustRsp: cur += e.disp; break;
      case K::SetFlag: flag = e.disp; break;
      case K::CallLookup: {
        const std::int64_t entry = cur - 8;
        // The lookup's own return address slot.
        for (std::int64_t b = entry; b < entry + 8; ++b) written.erase(b);
        for (const auto& r : lookup_clobbers(!flag || *flag != 0))
          for (std::int64_t b = entry + r.lo; b < entry + r.hi; ++b) written.erase(b);
        break;
      }
    }
  }
  return v;
}

// --- rewrite ---

struct BranchFixup {
  std::size_t old_offset;       // original instruction
  std::size_t field_offset;     // offset of the rel32 field in new_text
  std::uint64_t target_vaddr;   // link address the field resolves to
};

struct RipFixup {
  std::size_t old_offset;
  std::size_t field_offset;     // offset of the disp32 field in new_text
  std::uint64_t target_vaddr;   // original data address the operand reaches
};

struct RewriteStats {
  CountsReport counts;  // instructions of the disassembly, per kind
  std::size_t old_text_size = 0;
  std::size_t code_size = 0;          // laid-out instructions, glue included
  std::size_t stub_size = 0;          // trap + lookup stubs + alignment
  std::size_t mapping_table_size = 0;
  std::size_t region_table_size = 0;
  std::size_t new_text_size = 0;      // code + stubs + both tables
  std::size_t jump_trampolines = 0;
  std::size_t call_trampolines = 0;
  std::size_t return_trampolines = 0;
  std::size_t direct_branches = 0;
  std::size_t rip_rebased = 0;
  std::size_t far_traps = 0;
  std::size_t rip_traps = 0;  // RIP-relative operands that cannot reach their target
  std::size_t fallthrough_jumps = 0;
  std::size_t fallthrough_traps = 0;
};

struct RewriteOutput {
  DisassemblyMode mode = DisassemblyMode::Superset;
  std::uint64_t old_base = 0;
  std::uint64_t new_base = 0;
  std::vector<std::uint8_t> new_text;  // code, trap, local stub, global stub
  AddressMapping final_mapping;
  std::vector<std::uint8_t> mapping_bytes;
  RegionTable region_table;
  LookupStub local_stub;
  LookupStub global_stub;
  std::uint64_t trap_vaddr = 0;
  std::vector<BranchFixup> branch_fixups;
  std::vector<RipFixup> rip_fixups;
  RewriteStats stats;

  // Link address of the expansion of the instruction at `old_offset`.
  std::uint64_t translate(std::size_t old_offset) const {
    if (old_offset >= final_mapping.placement.size() || final_mapping.placement[old_offset] == kSentinel)
      fail(ErrorCode::UnmappedDirectTarget, "offset " + std::to_string(old_offset) + " was not laid out");
    return new_base + final_mapping.placement[old_offset];
  }
};

namespace detail {

struct Emitted {
  std::vector<std::uint8_t> bytes;
  std::vector<BranchFixup> branches;  // field_offset relative to the emission start
  std::vector<RipFixup> rips;
  bool glue_jump = false;  // trailing jmp to the successor
  bool glue_trap = false;  // trailing hlt: the successor is not code
  bool rip_trap = false;   // replaced by hlt: unreachable RIP-relative operand
};

enum class TranslationClass : std::uint8_t { Copy, Rip, Direct, Jump, Call, Return, FarTrap };

struct Rewriter {
  const DisassemblyResult& d;
  std::span<const std::uint8_t> code;
  const PassList& passes;
  const RewriteConfig& cfg;
  // Pass two only: final layout.
  const AddressMapping* mapping = nullptr;
  std::uint64_t trap_vaddr = 0;
  std::uint64_t lookup_vaddr = 0;

  std::uint64_t old_vaddr(std::size_t off) const { return d.region_base + off; }

  // Link address a direct branch to region offset `t` should reach.
  // `placeholder` is used in pass one, when the layout is not known yet.
  std::uint64_t resolve(std::int64_t t, std::uint64_t placeholder) const {
    const auto size = static_cast<std::int64_t>(d.region_size);
    if (t >= 0 && t < size) {
      const auto off = static_cast<std::size_t>(t);
      if (d.instructions.contains(off)) return mapping ? cfg.new_base + mapping->placement[off] : placeholder;
      if (contains(d.invalid_offsets, off)) return mapping ? trap_vaddr : placeholder;
      fail(ErrorCode::UnmappedDirectTarget,
           "direct branch target offset " + std::to_string(off) + " is not in the disassembly");
    }
    const std::uint64_t abs = d.region_base + static_cast<std::uint64_t>(t);
    return mapping ? abs : placeholder;
  }

  // Out-of-range rel32 targets outside the region fall back to the trap.
  std::uint64_t reachable(std::uint64_t target, std::uint64_t field_end) const {
    const auto rel = static_cast<std::int64_t>(target - field_end);
    return x86::fits_i32(rel) ? target : trap_vaddr;
  }

  TranslationClass classify(const DecodedInstruction& insn) const {
    switch (insn.kind) {
      case InstructionKind::DirectCall:
      case InstructionKind::DirectJump:
      case InstructionKind::ConditionalJump: return TranslationClass::Direct;
      case InstructionKind::IndirectJump: return insn.indirect()->far ? TranslationClass::FarTrap : TranslationClass::Jump;
      case InstructionKind::IndirectCall: return insn.indirect()->far ? TranslationClass::FarTrap : TranslationClass::Call;
      case InstructionKind::Return: return insn.far_return ? TranslationClass::FarTrap : TranslationClass::Return;
      default: return insn.rip_operand ? TranslationClass::Rip : TranslationClass::Copy;
    }
  }

  void translate(const DecodedInstruction& insn, std::uint64_t at, Emitted& e) const {
    using namespace x86;
    const std::uint8_t* src = code.data() + insn.offset;
    const std::uint64_t ov = old_vaddr(insn.offset);
    switch (classify(insn)) {
      case TranslationClass::Copy: e.bytes.insert(e.bytes.end(), src, src + insn.length); return;
      case TranslationClass::Rip: {
        if (!rip_operand_reachable(insn, ov, at)) {
          e.bytes.push_back(0xF4);
          e.rip_trap = true;
          return;
        }
        const std::size_t base = e.bytes.size();
        e.bytes.insert(e.bytes.end(), src, src + insn.length);
        const auto& rop = *insn.rip_operand;
        const std::uint64_t target = ov + insn.length + static_cast<std::uint64_t>(static_cast<std::int64_t>(rop.displacement_value));
        const std::uint64_t new_end = at + insn.length;
        const auto nd = static_cast<std::int64_t>(target - new_end);
        if (!fits_i32(nd))
          fail(ErrorCode::UnsupportedOperand,
               "RIP-relative operand at offset " + std::to_string(insn.offset) + " out of rel32 range");
        for (int i = 0; i < 4; ++i)
          e.bytes[base + rop.displacement_offset_in_instruction + i] = static_cast<std::uint8_t>(nd >> (8 * i));
        e.rips.push_back({insn.offset, base + rop.displacement_offset_in_instruction, target});
        return;
      }
      case TranslationClass::Direct: {
        Assembler a(at);
        const std::int64_t t = insn.direct()->absolute_target;
        const std::size_t base = e.bytes.size();
        auto emit_rel = [&](std::initializer_list<std::uint8_t> op) {
          const std::uint64_t field_end = a.here() + op.size() + 4;
          std::uint64_t target = resolve(t, field_end);
          if (mapping) target = reachable(target, field_end);
          a.branch_abs(op, target);
          e.branches.push_back({insn.offset, base + a.size() - 4, target});
        };
        const std::uint8_t op = insn.layout.opcode;
        if (insn.kind == InstructionKind::DirectCall) {
          a.push(rbx);
          a.lea(rbx, Mem::rip_to(ov + insn.length));
          a.xchg(rbx, Mem::at(rsp));
          emit_rel({0xE9});
        } else if (insn.kind == InstructionKind::DirectJump) {
          emit_rel({0xE9});
        } else if (insn.layout.map == OpcodeMap::Primary && op >= 0x70 && op <= 0x7F) {
          emit_rel({0x0F, static_cast<std::uint8_t>(0x80 | (op & 0x0F))});
        } else if (insn.layout.map == OpcodeMap::Map0F) {
          emit_rel({0x0F, op});
        } else if (insn.layout.map == OpcodeMap::Primary && op >= 0xE0 && op <= 0xE3) {
          if (insn.layout.address_size) a.u8(0x67);
          a.raw({op, 0x02, 0xEB, 0x05});
          emit_rel({0xE9});
        } else if (insn.layout.map == OpcodeMap::Primary && op == 0xC7) {
          emit_rel({0xC7, 0xF8});  // xbegin
        } else {
          fail(ErrorCode::UnsupportedOperand, "unhandled direct branch encoding");
        }
        auto bytes = a.finish();
        e.bytes.insert(e.bytes.end(), bytes.begin(), bytes.end());
        return;
      }
      case TranslationClass::Jump:
      case TranslationClass::Call:
      case TranslationClass::Return: {
        const auto cls = classify(insn);
        const StubTemplate t = cls == TranslationClass::Jump   ? StubTemplate::IndirectJump
                               : cls == TranslationClass::Call ? StubTemplate::IndirectCall
                                                               : StubTemplate::Return;
        const std::int32_t bias = (t == StubTemplate::IndirectJump && cfg.red_zone_safe) ? kRedZoneBias : 0;
        if (!rip_operand_reachable(insn, ov, at, kExpansionSlack)) {
          e.bytes.push_back(0xF4);
          e.rip_trap = true;
          return;
        }
        auto s = expand_stub(t, insn, code, ov, at, mapping ? lookup_vaddr : at, bias);
        e.bytes.insert(e.bytes.end(), s.bytes.begin(), s.bytes.end());
        return;
      }
      case TranslationClass::FarTrap: e.bytes.push_back(0xF4); return;
    }
  }

  // Everything emitted for one instruction: pass prologues, translation (or
  // a pass replacement), pass epilogues and fallthrough glue.
  Emitted expand(std::size_t position, std::uint64_t at) const {
    const DecodedInstruction& insn = d.instructions[position];
    Emitted e;
    std::optional<std::vector<std::uint8_t>> replacement;
    std::vector<std::uint8_t> epilogue;
    const std::int32_t bias =
        (insn.kind == InstructionKind::IndirectJump && cfg.red_zone_safe) ? kRedZoneBias : 0;
    for (const auto& p : passes) {
      PassContext ctx{insn, code, d.region_base, d.region_size, old_vaddr(insn.offset),
                      at + e.bytes.size(), d.mode, bias};
      PassOutput o = p->instrument(ctx);
      if (o.prologue) e.bytes.insert(e.bytes.end(), o.prologue->begin(), o.prologue->end());
      if (o.replacement) replacement = std::move(o.replacement);
      if (o.epilogue) epilogue.insert(epilogue.end(), o.epilogue->begin(), o.epilogue->end());
    }
    if (replacement) e.bytes.insert(e.bytes.end(), replacement->begin(), replacement->end());
    else translate(insn, at + e.bytes.size(), e);
    e.bytes.insert(e.bytes.end(), epilogue.begin(), epilogue.end());

    const auto cls = classify(insn);
    if (!is_terminator(insn.kind) && cls != TranslationClass::FarTrap) {
      const std::size_t succ = insn.end();
      const bool next_is_succ =
          position + 1 < d.instructions.size() && d.instructions[position + 1].offset == succ;
      if (!next_is_succ) {
        if (succ < d.region_size && d.instructions.contains(succ)) {
          x86::Assembler a(at + e.bytes.size());
          const std::uint64_t field_end = a.here() + 5;
          const std::uint64_t target = mapping ? cfg.new_base + mapping->placement[succ] : field_end;
          a.jmp_abs(target);
          e.branches.push_back({insn.offset, e.bytes.size() + 1, target});
          auto b = a.finish();
          e.bytes.insert(e.bytes.end(), b.begin(), b.end());
          e.glue_jump = true;
        } else {
          e.bytes.push_back(0xF4);
          e.glue_trap = true;
        }
      }
    }
    return e;
  }
};

inline std::uint64_t align_up(std::uint64_t v, std::uint64_t a) { return (v + a - 1) / a * a; }

}  // namespace detail

inline RewriteOutput rewrite(const DisassemblyResult& disasm, std::span<const std::uint8_t> code,
                             const PassList& passes, const RewriteConfig& config) {
  if (code.size() != disasm.region_size) fail(ErrorCode::Usage, "code does not match the disassembly region");
  detail::Rewriter rw{disasm, code, passes, config};

  // Pass one: sizes. Layout addresses are exact (every size is address
  // independent); only branch targets and the lookup address are unknown.
  std::vector<std::uint32_t> sizes;
  sizes.reserve(disasm.instructions.size());
  std::uint64_t cursor = config.new_base;
  for (std::size_t i = 0; i < disasm.instructions.size(); ++i) {
    const auto e = rw.expand(i, cursor);
    sizes.push_back(static_cast<std::uint32_t>(e.bytes.size()));
    cursor += e.bytes.size();
  }

  RewriteOutput out;
  out.mode = disasm.mode;
  out.old_base = disasm.region_base;
  out.new_base = config.new_base;
  out.final_mapping = build_mapping(disasm, {disasm.region_base, config.new_base}, sizes);
  const std::uint64_t code_size = out.final_mapping.laid_out_size;

  out.trap_vaddr = config.new_base + code_size;
  const std::uint64_t local_vaddr = detail::align_up(out.trap_vaddr + 1, 16);
  out.local_stub = emit_local_lookup_stub(out.final_mapping,
                                          {local_vaddr, config.mapping_table_vaddr, config.table_address});
  const std::uint64_t global_vaddr = detail::align_up(local_vaddr + out.local_stub.machine_code.size(), 16);
  out.region_table.table_address = config.table_address;
  out.region_table.global_lookup_address = global_vaddr;
  out.region_table.entries.push_back({local_vaddr, disasm.region_base, disasm.region_size});
  for (const auto& r : config.extra_regions) out.region_table.entries.push_back(r);
  out.global_stub = emit_global_lookup_stub(out.region_table, global_vaddr);

  // Pass two: emission.
  rw.mapping = &out.final_mapping;
  rw.trap_vaddr = out.trap_vaddr;
  rw.lookup_vaddr = local_vaddr;
  out.new_text.reserve(code_size + 512);
  for (std::size_t i = 0; i < disasm.instructions.size(); ++i) {
    const auto& insn = disasm.instructions[i];
    const std::size_t at = out.new_text.size();
    if (at != out.final_mapping.placement[insn.offset])
      fail(ErrorCode::SizeDivergence, "layout drift at offset " + std::to_string(insn.offset));
    auto e = rw.expand(i, config.new_base + at);
    if (e.bytes.size() != sizes[i])
      fail(ErrorCode::SizeDivergence, "offset " + std::to_string(insn.offset) + ": predicted " +
                                          std::to_string(sizes[i]) + " bytes, emitted " +
                                          std::to_string(e.bytes.size()));
    out.new_text.insert(out.new_text.end(), e.bytes.begin(), e.bytes.end());
    for (auto b : e.branches) {
      b.field_offset += at;
      out.branch_fixups.push_back(b);
    }
    for (auto r : e.rips) {
      r.field_offset += at;
      out.rip_fixups.push_back(r);
    }

    auto& st = out.stats;
    st.fallthrough_jumps += e.glue_jump;
    st.fallthrough_traps += e.glue_trap;
    st.rip_traps += e.rip_trap;
    switch (rw.classify(insn)) {
      case detail::TranslationClass::Direct: ++st.direct_branches; break;
      case detail::TranslationClass::Jump: st.jump_trampolines += !e.rip_trap; break;
      case detail::TranslationClass::Call: st.call_trampolines += !e.rip_trap; break;
      case detail::TranslationClass::Return: ++st.return_trampolines; break;
      case detail::TranslationClass::Rip: st.rip_rebased += !e.rip_trap; break;
      case detail::TranslationClass::FarTrap: ++st.far_traps; break;
      case detail::TranslationClass::Copy: break;
    }
  }

  // Trap, then the stubs, padded with hlt.
  out.new_text.push_back(0xF4);
  auto pad_to = [&](std::uint64_t vaddr) {
    while (config.new_base + out.new_text.size() < vaddr) out.new_text.push_back(0xF4);
  };
  pad_to(local_vaddr);
  out.new_text.insert(out.new_text.end(), out.local_stub.machine_code.begin(), out.local_stub.machine_code.end());
  pad_to(global_vaddr);
  out.new_text.insert(out.new_text.end(), out.global_stub.machine_code.begin(),
                      out.global_stub.machine_code.end());

  out.mapping_bytes = serialize_mapping(out.final_mapping);
  auto& st = out.stats;
  st.counts = disasm.stats;
  st.old_text_size = disasm.region_size;
  st.code_size = code_size;
  st.stub_size = out.new_text.size() - code_size;
  st.mapping_table_size = out.mapping_bytes.size();
  st.region_table_size = out.region_table.byte_size();
  st.new_text_size = out.new_text.size() + st.mapping_table_size + st.region_table_size;
  return out;
}

}  // namespace tva
