#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "tva/disassemble.hpp"

namespace {

using tva::DisassemblyMode;
using tva::InstructionKind;
using tva::NotrackPolicy;
using tva::OffsetSet;
using tva::testing::from_hex;

constexpr std::uint64_t kBase = 0x401000;

TEST(SupersetDisassemble, FiveNops) {
  const auto code = from_hex("9090909090");
  const auto r = tva::superset_disassemble(code, kBase);
  EXPECT_EQ(r.mode, DisassemblyMode::Superset);
  ASSERT_EQ(r.instructions.size(), 5u);
  for (const auto& insn : r.instructions) EXPECT_EQ(insn.kind, InstructionKind::Other);
  EXPECT_EQ(r.stats.total_instructions, 5u);
}

TEST(SupersetDisassemble, SingleReturn) {
  const auto code = from_hex("c3");
  const auto r = tva::superset_disassemble(code, kBase);
  ASSERT_EQ(r.instructions.size(), 1u);
  EXPECT_EQ(r.instructions.find(0)->kind, InstructionKind::Return);
  EXPECT_EQ(r.stats.total_instructions, 1u);
}

TEST(SupersetDisassemble, EveryValidOffsetOnce) {
  for (const auto& f : tva::testing::builtin_fixtures()) {
    const auto r = tva::superset_disassemble(f.code, kBase);
    std::size_t valid = 0;
    for (std::size_t off = 0; off < f.code.size(); ++off) {
      const auto d = tva::decode_at(f.code, off);
      if (d.kind == InstructionKind::Invalid) {
        EXPECT_TRUE(tva::contains(r.invalid_offsets, off)) << f.name << " " << off;
        EXPECT_FALSE(r.instructions.contains(off));
      } else {
        ++valid;
        ASSERT_TRUE(r.instructions.contains(off)) << f.name << " " << off;
        EXPECT_EQ(*r.instructions.find(off), d);
      }
    }
    EXPECT_EQ(r.stats.total_instructions, valid) << f.name;
  }
}

TEST(SupersetDisassemble, EmptyRegionHasNoInstructions) {
  const std::vector<std::uint8_t> empty;
  const auto r = tva::superset_disassemble(empty, kBase);
  EXPECT_TRUE(r.instructions.empty());
  EXPECT_EQ(r.stats.total_instructions, 0u);
}

TEST(CetDisassemble, EndbrThenReturn) {
  const auto f = tva::testing::endbr_ret();
  const auto r = tva::cet_disassemble(f.code, kBase, {});
  ASSERT_EQ(r.instructions.size(), 2u);
  EXPECT_EQ(r.instructions.find(0)->kind, InstructionKind::Endbr64);
  EXPECT_EQ(r.instructions.find(4)->kind, InstructionKind::Return);
  EXPECT_EQ(r.seeds, (OffsetSet{0}));
}

TEST(CetDisassemble, ReturnPrunesTheRest) {
  const auto f = tva::testing::triple_ret();
  const auto r = tva::cet_disassemble(f.code, kBase, {0});
  ASSERT_EQ(r.instructions.size(), 1u);
  EXPECT_TRUE(r.instructions.contains(0));
  EXPECT_FALSE(r.instructions.contains(1));
  EXPECT_FALSE(r.instructions.contains(2));
}

TEST(CetDisassemble, InvalidEntryPoint) {
  const auto code = from_hex("90 06 c3");
  try {
    tva::cet_disassemble(code, kBase, {1});
    FAIL() << "expected InvalidEntryPoint";
  } catch (const tva::Error& e) {
    EXPECT_EQ(e.code(), tva::ErrorCode::InvalidEntryPoint);
  }
  try {
    tva::cet_disassemble(code, kBase, {7});
    FAIL() << "expected InvalidEntryPoint";
  } catch (const tva::Error& e) {
    EXPECT_EQ(e.code(), tva::ErrorCode::InvalidEntryPoint);
  }
}

TEST(CetDisassemble, AccidentalEndbrInDataIsSeeded) {
  const auto f = tva::testing::fnptr();
  const auto r = tva::cet_disassemble(f.code, kBase, f.entry_points);
  EXPECT_TRUE(tva::contains(r.seeds, f.at("data_endbr")));
  EXPECT_TRUE(r.instructions.contains(f.at("data_endbr")));
  EXPECT_TRUE(tva::contains(r.indirect_target_candidates, f.at("data_endbr")));
  // The slot itself is data reached by nothing.
  EXPECT_FALSE(r.instructions.contains(f.at("slot")));
}

TEST(CetDisassemble, PostCallOffsetsAreCandidates) {
  const auto f = tva::testing::fnptr();
  const auto r = tva::cet_disassemble(f.code, kBase, f.entry_points);
  // call rax, call [rbx], call g, call [rip+slot]
  const OffsetSet expected{0x0e, 0x17, 0x1c, 0x29};
  EXPECT_EQ(r.post_call_offsets, expected);
  for (auto off : expected) EXPECT_TRUE(tva::contains(r.indirect_target_candidates, off));
}

TEST(CetDisassemble, OffEndPathsAreRecorded) {
  // endbr64; nop; nop -- the path runs off the end after offset 5.
  const auto code = from_hex("f30f1efa9090");
  const auto r = tva::cet_disassemble(code, kBase, {});
  EXPECT_EQ(r.instructions.size(), 3u);
  EXPECT_EQ(r.off_end_offsets, (OffsetSet{5}));
}

TEST(CetDisassemble, InvalidSuccessorIsRecorded) {
  const auto f = tva::testing::mixed();
  const auto r = tva::cet_disassemble(f.code, kBase, f.entry_points);
  // ud2 is a halt, so the bytes after it are not reached.
  EXPECT_FALSE(r.instructions.contains(0x1b));
  EXPECT_TRUE(r.instructions.contains(f.at("helper")));
  EXPECT_FALSE(r.instructions.contains(f.at("data")));
}

TEST(CetDisassemble, NotrackPolicies) {
  const auto f = tva::testing::notrack_switch();
  const auto warn = tva::cet_disassemble(f.code, kBase, f.entry_points, {NotrackPolicy::Warn});
  EXPECT_EQ(warn.notrack_sites, (OffsetSet{f.at("notrack_jmp")}));
  ASSERT_EQ(warn.warnings.size(), 1u);
  EXPECT_FALSE(warn.instructions.contains(f.at("c0")));
  EXPECT_FALSE(warn.instructions.contains(f.at("c1")));

  const auto fn = tva::cet_disassemble(f.code, kBase, f.entry_points, {NotrackPolicy::FallbackFunction});
  for (auto label : {"c0", "c1", "c2"}) {
    EXPECT_TRUE(fn.instructions.contains(f.at(label))) << label;
    EXPECT_TRUE(tva::contains(fn.indirect_target_candidates, f.at(label))) << label;
  }
  EXPECT_EQ(fn.warnings.size(), 1u);

  const auto region = tva::cet_disassemble(f.code, kBase, f.entry_points, {NotrackPolicy::FallbackRegion});
  const auto sup = tva::superset_disassemble(f.code, kBase);
  EXPECT_EQ(region.instructions.offsets(), sup.instructions.offsets());
}

TEST(CetDisassemble, FallbackFunctionStopsAtNextEndbr) {
  // notrack jmp rax; ret | endbr64; nop; ret -- only the first function is
  // seeded by the fallback.
  const auto code = from_hex("f30f1efa 3effe0 c3 f30f1efa 90 c3 0606");
  const auto r = tva::cet_disassemble(code, kBase, {}, {NotrackPolicy::FallbackFunction});
  EXPECT_TRUE(tva::contains(r.notrack_fallback_offsets, 7));
  EXPECT_FALSE(tva::contains(r.notrack_fallback_offsets, 13));
  EXPECT_FALSE(tva::contains(r.seeds, 14));
}

TEST(CetDisassemble, CandidateRecount) {
  // Three endbr64 sites and one post-call offset; the ten jump-only labels
  // are traversed but are not candidates.
  const auto f = tva::testing::candidates();
  const auto r = tva::cet_disassemble(f.code, kBase, f.entry_points);
  EXPECT_EQ(r.endbr64_sites, (OffsetSet{f.at("a"), f.at("b"), f.at("c")}));
  EXPECT_EQ(r.indirect_target_candidates, (OffsetSet{f.at("a"), f.at("post_call"), f.at("b"), f.at("c")}));
  for (auto t : {"t1", "t2", "t3", "t4", "t5", "t6", "t7", "t8", "t9", "t10"}) {
    EXPECT_TRUE(r.instructions.contains(f.at(t))) << t;
    EXPECT_FALSE(tva::contains(r.indirect_target_candidates, f.at(t))) << t;
  }
  // Brute-force recount: endbr64 byte patterns plus the fallthrough of every
  // call in the result.
  OffsetSet recount;
  for (std::size_t o = 0; o < f.code.size(); ++o)
    if (tva::is_endbr64_at(f.code, o)) recount.push_back(o);
  for (const auto& insn : r.instructions)
    if (tva::is_call(insn.kind)) recount.push_back(insn.end());
  std::sort(recount.begin(), recount.end());
  EXPECT_EQ(recount, r.indirect_target_candidates);
}

TEST(CetDisassemble, StatsMatchInstructionKinds) {
  for (const auto& f : tva::testing::builtin_fixtures()) {
    for (const auto& r :
         {tva::superset_disassemble(f.code, kBase), tva::cet_disassemble(f.code, kBase, f.entry_points)}) {
      tva::CountsReport c;
      for (const auto& insn : r.instructions) c.add(insn.kind);
      EXPECT_EQ(c, r.stats) << f.name;
    }
  }
}

TEST(CetDisassemble, IndependentOfEntryOrder) {
  const auto f = tva::testing::shadow_cases();
  OffsetSet forward = f.entry_points;
  OffsetSet backward(forward.rbegin(), forward.rend());
  backward.push_back(forward.front());
  const auto a = tva::cet_disassemble(f.code, kBase, forward);
  const auto b = tva::cet_disassemble(f.code, kBase, backward);
  EXPECT_EQ(a.instructions.offsets(), b.instructions.offsets());
  EXPECT_EQ(a.indirect_target_candidates, b.indirect_target_candidates);
  EXPECT_EQ(a.stats, b.stats);
}

// Closure and subset on the fixtures and on 500 random buffers.
TEST(Properties, ClosureAndSubsetOnFixtures) {
  for (const auto& f : tva::testing::builtin_fixtures()) {
    SCOPED_TRACE(f.name);
    const auto cet = tva::cet_disassemble(f.code, kBase, f.entry_points);
    const auto sup = tva::superset_disassemble(f.code, kBase);
    EXPECT_EQ(tva::testing::closure_violations(f.code, cet), std::vector<std::string>{});
    EXPECT_EQ(tva::testing::subset_violations(f.code, cet), std::vector<std::string>{});
    EXPECT_TRUE(tva::compare_modes(sup, cet).subset_holds());
  }
}

TEST(Properties, ClosureAndSubsetOnRandomBuffers) {
  std::mt19937_64 rng(0x7661);
  std::size_t total_cet = 0;
  for (int i = 0; i < 500; ++i) {
    const std::size_t size = 16 + rng() % (4096 - 16 + 1);
    const auto code = tva::testing::random_code(rng, size);
    OffsetSet entries;
    for (int k = 0; k < 3; ++k) {
      const std::size_t e = rng() % size;
      if (tva::decode_at(code, e).kind != InstructionKind::Invalid) entries.push_back(e);
    }
    for (auto policy : {NotrackPolicy::Warn, NotrackPolicy::FallbackFunction}) {
      const auto cet = tva::cet_disassemble(code, kBase, entries, {policy});
      total_cet += cet.instructions.size();
      ASSERT_EQ(tva::testing::closure_violations(code, cet), std::vector<std::string>{}) << "buffer " << i;
      ASSERT_EQ(tva::testing::subset_violations(code, cet), std::vector<std::string>{}) << "buffer " << i;
    }
  }
  EXPECT_GT(total_cet, 10000u);  // the buffers exercise real traversals
}

// Every instruction a direct-flow emulation can execute is in the result.
TEST(Properties, SoundnessAgainstEmulation) {
  for (const auto& f : tva::testing::builtin_fixtures()) {
    if (!f.indirect_targets || f.entry_points.empty()) continue;
    SCOPED_TRACE(f.name);
    const auto cet = tva::cet_disassemble(f.code, kBase, f.entry_points);
    const auto reached = tva::testing::emulate_reachable(f.code, f.entry_points, *f.indirect_targets);
    EXPECT_FALSE(reached.empty());
    for (auto off : reached) EXPECT_TRUE(cet.instructions.contains(off)) << "missed offset " << off;
  }
}

TEST(Properties, WarnPolicyMissesNotrackTargets) {
  // The oracle notices what silent pruning would lose.
  const auto f = tva::testing::notrack_switch();
  const auto cet = tva::cet_disassemble(f.code, kBase, f.entry_points, {NotrackPolicy::Warn});
  const auto reached = tva::testing::emulate_reachable(f.code, f.entry_points, *f.indirect_targets);
  std::size_t missed = 0;
  for (auto off : reached) missed += !cet.instructions.contains(off);
  EXPECT_GT(missed, 0u);
}

TEST(CompareModes, EveryOffsetReachableGivesRatioOne) {
  const auto f = tva::testing::five_nops();
  const auto sup = tva::superset_disassemble(f.code, kBase);
  const auto cet = tva::cet_disassemble(f.code, kBase, {0, 1, 2, 3, 4});
  const auto rep = tva::compare_modes(sup, cet);
  EXPECT_DOUBLE_EQ(rep.ratio, 1.0);
  EXPECT_TRUE(rep.difference.empty());
  EXPECT_TRUE(rep.subset_holds());
}

TEST(CompareModes, PrunedPathRatio) {
  const auto f = tva::testing::pruned_path();
  const auto sup = tva::superset_disassemble(f.code, kBase);
  const auto cet = tva::cet_disassemble(f.code, kBase, {});
  // Brute-force enumeration: count valid offsets, walk the single path.
  std::size_t decodable = 0;
  for (std::size_t o = 0; o < f.code.size(); ++o)
    decodable += tva::decode_at(f.code, o).kind != InstructionKind::Invalid;
  ASSERT_EQ(decodable, 16u);
  ASSERT_EQ(tva::testing::emulate_reachable(f.code, {0}, {}).size(), 4u);
  const auto rep = tva::compare_modes(sup, cet);
  EXPECT_EQ(rep.superset.total_instructions, 16u);
  EXPECT_EQ(rep.cet.total_instructions, 4u);
  EXPECT_DOUBLE_EQ(rep.ratio, 0.25);
  EXPECT_EQ(rep.difference.size(), 12u);
}

TEST(CompareModes, RegionMismatch) {
  const auto code = from_hex("90909090");
  const auto a = tva::superset_disassemble(code, kBase);
  const auto b = tva::cet_disassemble(code, kBase + 1, {0});
  try {
    tva::compare_modes(a, b);
    FAIL();
  } catch (const tva::Error& e) {
    EXPECT_EQ(e.code(), tva::ErrorCode::RegionMismatch);
  }
}

}  // namespace
