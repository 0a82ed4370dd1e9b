#include <gtest/gtest.h>

#include <algorithm>

#include "fixtures.hpp"
#include "tva/rewrite.hpp"

namespace {

using tva::DisassemblyMode;
using tva::InstructionKind;
using tva::StubTemplate;
using tva::testing::from_hex;
using tva::testing::rewrite_config;

constexpr std::uint64_t kOld = 0x401000;
constexpr std::uint64_t kNew = 0x800000;
constexpr std::uint64_t kMap = 0x900000;

std::int64_t rel32_at(const std::vector<std::uint8_t>& code, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(code[at + i]) << (8 * i);
  return static_cast<std::int32_t>(v);
}

tva::DisassemblyResult disassemble(const tva::testing::Fixture& f, DisassemblyMode mode) {
  return mode == DisassemblyMode::Superset ? tva::superset_disassemble(f.code, kOld)
                                           : tva::cet_disassemble(f.code, kOld, f.entry_points);
}

tva::RewriteOutput rewrite(const tva::DisassemblyResult& d, std::span<const std::uint8_t> code,
                           const tva::PassList& passes = {}, bool red_zone_safe = false) {
  return tva::rewrite(d, code, passes, rewrite_config(kNew, kMap, red_zone_safe));
}

// Template bytes at 0x800000 with the local lookup at 0x800100, for an
// original instruction at 0x401000. Listings from objdump:
//   mov [rsp-64],rax; mov [rsp-72],rbx; mov rax,rax; mov ebx,0;
//   call lookup; mov [rsp-8],rax; mov rax,[rsp-64]; mov rbx,[rsp-72];
//   jmp [rsp-8]
constexpr const char* kJmpRax =
    "48894424c0 48895c24b8 4889c0 bb00000000 e8e9000000 48894424f8 488b4424c0 488b5c24b8 ff6424f8";
//   mov [rsp-64],rax; mov [rsp-72],rbx; mov rax,[rbx+8]; mov ebx,1;
//   push rbx; lea rbx,[rip -> 0x401003]; xchg rbx,[rsp]; call lookup;
//   mov [rsp-8],rax; mov rax,[rsp-56]; mov rbx,[rsp-64]; jmp [rsp-8]
constexpr const char* kCallRbx8 =
    "48894424c0 48895c24b8 488b4308 bb01000000 53 488d1de80fc0ff 48871c24 e8dc000000 48894424f8 488b4424c8 "
    "488b5c24c0 ff6424f8";
//   mov [rsp-56],rax; pop rax; push rbx; mov ebx,0; call lookup; pop rbx;
//   mov [rsp-8],rax; mov rax,[rsp-64]; jmp [rsp-8]
constexpr const char* kRet = "48894424c8 58 53 bb00000000 e8ef000000 5b 48894424f8 488b4424c0 ff6424f8";
//   lea rsp,[rsp-128]; (jump template) ; lea rsp,[rsp+128]; jmp [rsp-136]
constexpr const char* kJmpRaxRedZone =
    "488d642480 48894424c0 48895c24b8 4889c0 bb00000000 e8e4000000 48894424f8 488b4424c0 488b5c24b8 "
    "488da42480000000 ffa42478ffffff";

tva::StubExpansion expand(const char* hex, StubTemplate t, std::int32_t bias = 0) {
  const auto code = from_hex(hex);
  return tva::expand_stub(t, tva::decode_at(code, 0), code, 0x401000, 0x800000, 0x800100, bias);
}

TEST(ExpandStub, IndirectJump) {
  const auto s = expand("ffe0", StubTemplate::IndirectJump);
  EXPECT_EQ(s.bytes, from_hex(kJmpRax));
  EXPECT_EQ(s.lookup_call_field, 0x13u);
}

TEST(ExpandStub, IndirectCallThroughMemory) {
  const auto s = expand("ff5308", StubTemplate::IndirectCall);
  EXPECT_EQ(s.bytes, from_hex(kCallRbx8));
}

TEST(ExpandStub, Return) { EXPECT_EQ(expand("c3", StubTemplate::Return).bytes, from_hex(kRet)); }

TEST(ExpandStub, RedZoneBias) {
  EXPECT_EQ(expand("ffe0", StubTemplate::IndirectJump, tva::kRedZoneBias).bytes, from_hex(kJmpRaxRedZone));
}

TEST(ExpandStub, ReturnWithPop) {
  const auto s = expand("c20800", StubTemplate::Return);
  // ... mov rax,[rsp-64]; lea rsp,[rsp+8]; jmp [rsp-16]
  const auto tail = from_hex("488b4424c0 488d642408 ff6424f0");
  ASSERT_GE(s.bytes.size(), tail.size());
  EXPECT_TRUE(std::equal(tail.begin(), tail.end(), s.bytes.end() - static_cast<std::ptrdiff_t>(tail.size())));
}

TEST(ExpandStub, RspRelativeOperandSeesOriginalRsp) {
  // jmp [rsp+8] is materialized after no rsp change: mov rax,[rsp+8].
  auto s = expand("ff642408", StubTemplate::IndirectJump);
  EXPECT_EQ(std::vector<std::uint8_t>(s.bytes.begin() + 10, s.bytes.begin() + 15), from_hex("488b442408"));
  // With the red-zone bias the displacement compensates: mov rax,[rsp+136].
  s = expand("ff642408", StubTemplate::IndirectJump, tva::kRedZoneBias);
  EXPECT_EQ(std::vector<std::uint8_t>(s.bytes.begin() + 15, s.bytes.begin() + 23), from_hex("488b842488000000"));
}

// Every slot a template reads back was written by the template and survived
// the lookup call, for each template, operand form and bias.
TEST(StackSlotDiscipline, AllTemplatesClean) {
  struct Case {
    const char* hex;
    StubTemplate t;
  };
  const Case cases[] = {{"ffe0", StubTemplate::IndirectJump},
                        {"ff642408", StubTemplate::IndirectJump},
                        {"3effe0", StubTemplate::IndirectJump},
                        {"ff2500000000", StubTemplate::IndirectJump},
                        {"ffd0", StubTemplate::IndirectCall},
                        {"ff5308", StubTemplate::IndirectCall},
                        {"ff542408", StubTemplate::IndirectCall},
                        {"ff1500000000", StubTemplate::IndirectCall},
                        {"c3", StubTemplate::Return},
                        {"c21000", StubTemplate::Return}};
  for (const auto& c : cases) {
    for (std::int32_t bias : {0, tva::kRedZoneBias}) {
      if (bias && c.t != StubTemplate::IndirectJump) continue;
      SCOPED_TRACE(std::string(c.hex) + " bias " + std::to_string(bias));
      const auto v = tva::check_stack_slot_discipline(expand(c.hex, c.t, bias).effects);
      for (const auto& x : v) ADD_FAILURE() << x.what << " at byte " << x.at << " slot " << x.slot;
    }
  }
}

TEST(StackSlotDiscipline, DetectsBadSequences) {
  using K = tva::x86::StackEffect::Kind;
  // Read of a slot nobody wrote.
  EXPECT_EQ(tva::check_stack_slot_discipline({{K::Read, -16, 0}}).size(), 1u);
  // Written, then clobbered by a lookup with the flag set.
  EXPECT_EQ(tva::check_stack_slot_discipline(
                {{K::Write, -16, 0}, {K::SetFlag, 1, 5}, {K::CallLookup, 0, 10}, {K::Read, -16, 15}})
                .size(),
            1u);
  // Reads at or above the entry rsp are the program's own.
  EXPECT_TRUE(tva::check_stack_slot_discipline({{K::Read, 0, 0}, {K::Read, 8, 5}}).empty());
  // Written and read back with no call in between.
  EXPECT_TRUE(tva::check_stack_slot_discipline({{K::Write, -64, 0}, {K::Read, -64, 5}}).empty());
}

TEST(Rewrite, LoneReturn) {
  const auto code = from_hex("c3");
  const auto d = tva::superset_disassemble(code, kOld);
  const auto out = rewrite(d, code);
  const auto expect =
      tva::expand_stub(StubTemplate::Return, d.instructions.at(0), code, kOld, kNew, out.local_stub.vaddr);
  ASSERT_GE(out.new_text.size(), expect.bytes.size());
  EXPECT_TRUE(std::equal(expect.bytes.begin(), expect.bytes.end(), out.new_text.begin()));
  EXPECT_EQ(out.stats.return_trampolines, 1u);
  EXPECT_EQ(out.trap_vaddr, kNew + expect.bytes.size());
  EXPECT_EQ(out.new_text[expect.bytes.size()], 0xF4);
}

TEST(Rewrite, ShortJumpBecomesRel32) {
  const auto code = from_hex("eb01 90 c3");  // jmp +1 -> 3; nop; ret
  const auto d = tva::cet_disassemble(code, kOld, {0});
  const auto out = rewrite(d, code);
  ASSERT_EQ(out.new_text[0], 0xE9);
  EXPECT_EQ(kNew + 5 + rel32_at(out.new_text, 1), out.translate(3));
  EXPECT_EQ(out.final_mapping.placement[3], 5u);
}

TEST(Rewrite, DirectCallPushesOriginalReturnAddress) {
  const auto code = from_hex("e800000000 c3");  // call 5; ret
  const auto d = tva::cet_disassemble(code, kOld, {0});
  const auto out = rewrite(d, code);
  // push rbx; lea rbx,[rip+X]; xchg rbx,[rsp]; jmp rel32
  ASSERT_EQ(out.new_text[0], 0x53);
  EXPECT_EQ(std::vector<std::uint8_t>(out.new_text.begin() + 1, out.new_text.begin() + 4), from_hex("488d1d"));
  EXPECT_EQ(kNew + 8 + rel32_at(out.new_text, 4), kOld + 5);
  EXPECT_EQ(std::vector<std::uint8_t>(out.new_text.begin() + 8, out.new_text.begin() + 12), from_hex("48871c24"));
  ASSERT_EQ(out.new_text[12], 0xE9);
  EXPECT_EQ(kNew + 17 + rel32_at(out.new_text, 13), out.translate(5));
}

TEST(Rewrite, LoopKeepsRel8FormWithRel32Tail) {
  const auto code = from_hex("e2fe c3");  // loop self; ret
  const auto d = tva::cet_disassemble(code, kOld, {0});
  const auto out = rewrite(d, code);
  EXPECT_EQ(std::vector<std::uint8_t>(out.new_text.begin(), out.new_text.begin() + 5), from_hex("e202eb05e9"));
  EXPECT_EQ(kNew + 9 + rel32_at(out.new_text, 5), out.translate(0));
  // Not taken: the jmp +5 lands on the translated successor.
  EXPECT_EQ(out.translate(2), kNew + 9);
}

TEST(Rewrite, FarTransfersTrap) {
  const auto code = from_hex("ff2c24 ff1c24 cb");  // jmp far [rsp]; call far [rsp]; retf
  const auto d = tva::superset_disassemble(code, kOld);
  const auto out = rewrite(d, code);
  EXPECT_EQ(out.stats.far_traps, 3u);
  for (std::size_t off : {0u, 3u, 6u}) EXPECT_EQ(out.new_text[out.final_mapping.placement[off]], 0xF4) << off;
}

TEST(Rewrite, UnreachableRipOperandTraps) {
  // mov rax,[rip+0x7ffffff0]; ret. Moving the code 0xf800000 bytes down puts
  // the operand out of rel32 reach.
  const auto code = from_hex("488b05f0ffff7f c3");
  const std::uint64_t old_base = 0x10000000;
  const auto d = tva::cet_disassemble(code, old_base, {0});
  const auto far = tva::rewrite(d, code, {}, rewrite_config(kNew, kMap));
  EXPECT_EQ(far.stats.rip_traps, 1u);
  EXPECT_EQ(far.stats.rip_rebased, 0u);
  EXPECT_EQ(far.new_text[0], 0xF4);
  // Close enough: the operand is rebased.
  const auto near = tva::rewrite(d, code, {}, rewrite_config(old_base + 0x100000, old_base + 0x200000));
  EXPECT_EQ(near.stats.rip_traps, 0u);
  EXPECT_EQ(near.stats.rip_rebased, 1u);
  ASSERT_EQ(near.rip_fixups.size(), 1u);
  EXPECT_EQ(near.rip_fixups[0].target_vaddr, old_base + 7 + 0x7ffffff0);
}

TEST(Rewrite, UnmappedDirectTarget) {
  const auto code = from_hex("eb01 90 c3");
  auto d = tva::cet_disassemble(code, kOld, {0});
  tva::InstructionMap pruned(code.size());
  pruned.insert(d.instructions.at(0));
  d.instructions = pruned;
  try {
    rewrite(d, code);
    FAIL() << "expected UnmappedDirectTarget";
  } catch (const tva::Error& e) {
    EXPECT_EQ(e.code(), tva::ErrorCode::UnmappedDirectTarget);
  }
}

TEST(Rewrite, CodeSizeMustMatchRegion) {
  const auto code = from_hex("90c3");
  const auto d = tva::superset_disassemble(code, kOld);
  const auto shorter = from_hex("90");
  EXPECT_THROW(rewrite(d, shorter), tva::Error);
}

class RewriteFixtures : public ::testing::TestWithParam<DisassemblyMode> {};

// Direct branches reach translate(old target); RIP-relative operands reach
// their original absolute target; glue jumps reach the successor.
TEST_P(RewriteFixtures, BranchAndRipTargets) {
  for (const auto& f : tva::testing::builtin_fixtures()) {
    SCOPED_TRACE(f.name);
    const auto d = disassemble(f, GetParam());
    const auto out = rewrite(d, f.code);
    const std::span<const std::uint8_t> text(out.new_text.data(), out.stats.code_size);
    for (const auto& insn : d.instructions) {
      const auto* dir = insn.direct();
      if (!dir) continue;
      SCOPED_TRACE("offset " + std::to_string(insn.offset));
      std::size_t p = out.final_mapping.placement[insn.offset];
      tva::DecodedInstruction n;
      do {
        n = tva::decode_at(text, p);
        ASSERT_NE(n.kind, InstructionKind::Invalid);
        p = n.end();
      } while (!(n.direct() && n.length >= 5));
      const std::uint64_t got = kNew + static_cast<std::uint64_t>(n.direct()->absolute_target);
      const std::int64_t t = dir->absolute_target;
      std::uint64_t want;
      if (t >= 0 && static_cast<std::size_t>(t) < f.code.size()) {
        const auto off = static_cast<std::size_t>(t);
        want = d.instructions.contains(off) ? out.translate(off) : out.trap_vaddr;
      } else {
        want = kOld + static_cast<std::uint64_t>(t);
      }
      EXPECT_EQ(got, want);
    }
    for (const auto& fx : out.branch_fixups)
      EXPECT_EQ(kNew + fx.field_offset + 4 + rel32_at(out.new_text, fx.field_offset), fx.target_vaddr);
    for (const auto& fx : out.rip_fixups) {
      const auto len = d.instructions.at(fx.old_offset).length;
      const std::uint64_t end = kNew + out.final_mapping.placement[fx.old_offset] + len;
      EXPECT_EQ(end + rel32_at(out.new_text, fx.field_offset), fx.target_vaddr);
      EXPECT_EQ(fx.target_vaddr,
                kOld + fx.old_offset + len + d.instructions.at(fx.old_offset).rip_operand->displacement_value);
    }
  }
}

// The laid-out code re-disassembles cleanly from the translated seeds.
TEST_P(RewriteFixtures, RedisassemblesCleanly) {
  for (const auto& f : tva::testing::builtin_fixtures()) {
    SCOPED_TRACE(f.name);
    const auto d = disassemble(f, GetParam());
    if (d.instructions.empty()) continue;
    const auto out = rewrite(d, f.code);
    const std::span<const std::uint8_t> text(out.new_text.data(), out.stats.code_size);
    tva::OffsetSet seeds;
    for (auto s : d.seeds)
      if (d.instructions.contains(s)) seeds.push_back(out.final_mapping.placement[s]);
    for (auto c : d.indirect_target_candidates) seeds.push_back(out.final_mapping.placement[c]);
    std::sort(seeds.begin(), seeds.end());
    seeds.erase(std::unique(seeds.begin(), seeds.end()), seeds.end());
    const auto again = tva::cet_disassemble(text, kNew, seeds);
    EXPECT_TRUE(again.invalid_offsets.empty()) << again.invalid_offsets.size() << " invalid offsets";
    for (auto s : seeds) EXPECT_TRUE(again.instructions.contains(s));
  }
}

TEST_P(RewriteFixtures, NullPassIsIdentity) {
  for (const auto& f : tva::testing::builtin_fixtures()) {
    SCOPED_TRACE(f.name);
    const auto d = disassemble(f, GetParam());
    for (bool rz : {false, true}) {
      const auto a = rewrite(d, f.code, {}, rz);
      const auto b = rewrite(d, f.code, {tva::null_pass()}, rz);
      const auto c = rewrite(d, f.code, {tva::null_pass(), tva::null_pass()}, rz);
      EXPECT_EQ(a.new_text, b.new_text);
      EXPECT_EQ(a.new_text, c.new_text);
      EXPECT_EQ(a.mapping_bytes, b.mapping_bytes);
    }
  }
}

TEST_P(RewriteFixtures, SizeAccounting) {
  for (const auto& f : tva::testing::builtin_fixtures()) {
    SCOPED_TRACE(f.name);
    const auto d = disassemble(f, GetParam());
    const auto out = rewrite(d, f.code);
    const auto& st = out.stats;
    EXPECT_EQ(st.old_text_size, f.code.size());
    EXPECT_EQ(st.code_size, out.final_mapping.laid_out_size);
    EXPECT_EQ(st.code_size + st.stub_size, out.new_text.size());
    EXPECT_EQ(st.mapping_table_size, 4 * f.code.size());
    EXPECT_EQ(st.mapping_table_size, out.mapping_bytes.size());
    EXPECT_EQ(st.region_table_size, 0x18u + 24 * out.region_table.entries.size());
    EXPECT_EQ(st.new_text_size, out.new_text.size() + st.mapping_table_size + st.region_table_size);
    EXPECT_EQ(out.trap_vaddr, kNew + st.code_size);
    EXPECT_EQ(out.local_stub.vaddr % 16, 0u);
    EXPECT_EQ(out.global_stub.vaddr % 16, 0u);
    EXPECT_EQ(out.region_table.global_lookup_address, out.global_stub.vaddr);
    ASSERT_FALSE(out.region_table.entries.empty());
    EXPECT_EQ(out.region_table.entries[0].local_lookup_address, out.local_stub.vaddr);
    EXPECT_EQ(out.region_table.entries[0].region_base, kOld);
    EXPECT_EQ(out.region_table.entries[0].region_size, f.code.size());
    // Placement is strictly increasing and agrees with translate().
    std::size_t prev = 0;
    bool first = true;
    for (const auto& insn : d.instructions) {
      const auto p = out.final_mapping.placement[insn.offset];
      if (!first) {
        EXPECT_GT(p, prev);
      }
      EXPECT_EQ(out.translate(insn.offset), kNew + p);
      prev = p;
      first = false;
    }
  }
}

TEST_P(RewriteFixtures, StubPaddingIsHalt) {
  for (const auto& f : tva::testing::builtin_fixtures()) {
    SCOPED_TRACE(f.name);
    const auto out = rewrite(disassemble(f, GetParam()), f.code);
    for (std::uint64_t v = out.trap_vaddr; v < out.local_stub.vaddr; ++v) EXPECT_EQ(out.new_text[v - kNew], 0xF4);
    const std::uint64_t local_end = out.local_stub.vaddr + out.local_stub.machine_code.size();
    for (std::uint64_t v = local_end; v < out.global_stub.vaddr; ++v) EXPECT_EQ(out.new_text[v - kNew], 0xF4);
  }
}

INSTANTIATE_TEST_SUITE_P(Modes, RewriteFixtures,
                         ::testing::Values(DisassemblyMode::Superset, DisassemblyMode::CetGuided),
                         [](const auto& info) {
                           return info.param == DisassemblyMode::Superset ? "Superset" : "CetGuided";
                         });

TEST(Rewrite, ExtraRegionsFollowTheRewrittenOne) {
  const auto f = tva::testing::fnptr();
  const auto d = disassemble(f, DisassemblyMode::CetGuided);
  auto cfg = rewrite_config(kNew, kMap);
  cfg.extra_regions.push_back({0, 0, ~std::uint64_t{0}});
  const auto out = tva::rewrite(d, f.code, {}, cfg);
  ASSERT_EQ(out.region_table.entries.size(), 2u);
  EXPECT_TRUE(out.region_table.entries[1].external());
}

TEST(Rewrite, CetShrinksMapping) {
  const auto f = tva::testing::fnptr();
  const auto sup = rewrite(disassemble(f, DisassemblyMode::Superset), f.code);
  const auto cet = rewrite(disassemble(f, DisassemblyMode::CetGuided), f.code);
  EXPECT_LT(cet.final_mapping.mapped_count(), sup.final_mapping.mapped_count());
  EXPECT_LT(cet.stats.code_size, sup.stats.code_size);
}

}  // namespace
