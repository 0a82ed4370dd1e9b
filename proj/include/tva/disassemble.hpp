#pragma once

// Superset and endbr64-seeded (CET-guided) disassembly of one code region.
//
// All offsets are region-relative. `region_base` is the link-time virtual
// address of offset 0 and is carried along only for reporting and for the
// address map; decoding itself never looks at it.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tva/decode.hpp"
#include "tva/error.hpp"

namespace tva {

enum class DisassemblyMode : std::uint8_t { Superset, CetGuided };

constexpr std::string_view to_string(DisassemblyMode mode) {
  return mode == DisassemblyMode::Superset ? "superset" : "cet";
}

// What CET-guided traversal does with a NOTRACK indirect branch, whose
// targets need not carry endbr64.
enum class NotrackPolicy : std::uint8_t {
  Warn,              // record the site and a warning, seed nothing extra
  FallbackFunction,  // seed every offset between the enclosing endbr64 sites
  FallbackRegion,    // seed every offset of the region
};

struct CountsReport {
  std::size_t total_instructions = 0;
  std::size_t direct_call = 0;
  std::size_t direct_jump = 0;
  std::size_t indirect_call = 0;
  std::size_t indirect_jump = 0;
  std::size_t conditional_jump = 0;

  void add(InstructionKind kind) {
    ++total_instructions;
    switch (kind) {
      case InstructionKind::DirectCall: ++direct_call; break;
      case InstructionKind::DirectJump: ++direct_jump; break;
      case InstructionKind::IndirectCall: ++indirect_call; break;
      case InstructionKind::IndirectJump: ++indirect_jump; break;
      case InstructionKind::ConditionalJump: ++conditional_jump; break;
      default: break;
    }
  }

  friend bool operator==(const CountsReport&, const CountsReport&) = default;
};

using OffsetSet = std::vector<std::size_t>;  // sorted, unique

inline bool contains(const OffsetSet& set, std::size_t offset) {
  return std::binary_search(set.begin(), set.end(), offset);
}

inline OffsetSet set_union(const OffsetSet& a, const OffsetSet& b) {
  OffsetSet out;
  out.reserve(a.size() + b.size());
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

// Offset-ordered instruction store with O(1) lookup by offset.
class InstructionMap {
 public:
  InstructionMap() = default;
  explicit InstructionMap(std::size_t region_size) : index_(region_size, kAbsent) {
    if (region_size >= kAbsent) fail(ErrorCode::Overflow, "region too large for the instruction index");
  }

  std::size_t region_size() const { return index_.size(); }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }

  bool contains(std::size_t offset) const { return offset < index_.size() && index_[offset] != kAbsent; }

  const DecodedInstruction* find(std::size_t offset) const {
    return contains(offset) ? &items_[index_[offset]] : nullptr;
  }

  const DecodedInstruction& at(std::size_t offset) const {
    if (!contains(offset)) fail(ErrorCode::Usage, "no instruction at offset " + std::to_string(offset));
    return items_[index_[offset]];
  }

  // Returns false when an instruction already exists at that offset.
  bool insert(const DecodedInstruction& insn) {
    if (contains(insn.offset)) return false;
    if (!items_.empty() && insn.offset < items_.back().offset) sorted_ = false;
    index_.at(insn.offset) = static_cast<std::uint32_t>(items_.size());
    items_.push_back(insn);
    return true;
  }

  // Restores offset order after out-of-order inserts.
  void finalize() {
    if (sorted_) return;
    std::sort(items_.begin(), items_.end(),
              [](const DecodedInstruction& a, const DecodedInstruction& b) { return a.offset < b.offset; });
    for (std::size_t i = 0; i < items_.size(); ++i) index_[items_[i].offset] = static_cast<std::uint32_t>(i);
    sorted_ = true;
  }

  // Position of the instruction at `offset` in iteration order.
  std::size_t position(std::size_t offset) const {
    if (!contains(offset)) fail(ErrorCode::Usage, "no instruction at offset " + std::to_string(offset));
    return index_[offset];
  }

  OffsetSet offsets() const {
    OffsetSet out;
    out.reserve(items_.size());
    for (const auto& i : items_) out.push_back(i.offset);
    return out;
  }

  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  const DecodedInstruction& operator[](std::size_t position) const { return items_[position]; }

 private:
  static constexpr std::uint32_t kAbsent = 0xffffffffu;
  std::vector<DecodedInstruction> items_;
  std::vector<std::uint32_t> index_;
  bool sorted_ = true;
};

struct DisassemblyResult {
  DisassemblyMode mode = DisassemblyMode::Superset;
  std::uint64_t region_base = 0;
  std::size_t region_size = 0;

  // Valid (non-Invalid) decodes only.
  InstructionMap instructions;
  // Superset: every offset that decodes Invalid. CET: Invalid offsets some
  // path reached (those paths stop there).
  OffsetSet invalid_offsets;
  // Offsets of instructions whose straight-line successor lies at or past the
  // region end. The path stops there.
  OffsetSet off_end_offsets;
  // Direct targets outside [0, region_size), as region-relative values.
  std::vector<std::int64_t> external_targets;

  OffsetSet entry_points;
  OffsetSet endbr64_sites;
  // Offsets directly after a call instruction of the result that hold a
  // valid decode.
  OffsetSet post_call_offsets;
  // NOTRACK indirect branches found in the result, and the extra offsets the
  // fallback policy seeded for them (valid decodes only).
  OffsetSet notrack_sites;
  OffsetSet notrack_fallback_offsets;
  // CET: entry points, endbr64 sites and fallback offsets.
  OffsetSet seeds;
  // endbr64 sites, post-call offsets and NOTRACK fallback offsets. These are
  // the offsets the mapping table must translate.
  OffsetSet indirect_target_candidates;

  std::vector<std::string> warnings;
  CountsReport stats;
};

struct CetOptions {
  NotrackPolicy notrack = NotrackPolicy::FallbackFunction;
};

namespace detail {

inline OffsetSet find_endbr64_sites(std::span<const std::uint8_t> code) {
  OffsetSet out;
  if (code.size() < 4) return out;
  for (std::size_t i = 0; i + 4 <= code.size(); ++i)
    if (is_endbr64_at(code, i)) out.push_back(i);
  return out;
}

inline void sort_unique(std::vector<std::size_t>& v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
}

inline void sort_unique(std::vector<std::int64_t>& v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
}

inline void fill_stats(DisassemblyResult& r) {
  r.stats = {};
  for (const auto& insn : r.instructions) r.stats.add(insn.kind);
}

inline bool is_notrack_branch(const DecodedInstruction& insn) {
  const auto* ind = insn.indirect();
  return ind && ind->notrack;
}

}  // namespace detail

inline DisassemblyResult superset_disassemble(std::span<const std::uint8_t> code, std::uint64_t region_base) {
  DisassemblyResult r;
  r.mode = DisassemblyMode::Superset;
  r.region_base = region_base;
  r.region_size = code.size();
  r.instructions = InstructionMap(code.size());
  OffsetSet post_call;
  for (std::size_t off = 0; off < code.size(); ++off) {
    const DecodedInstruction insn = decode_at(code, off);
    if (insn.kind == InstructionKind::Invalid) {
      r.invalid_offsets.push_back(off);
      continue;
    }
    r.instructions.insert(insn);
    if (insn.end() >= code.size() && !is_terminator(insn.kind)) r.off_end_offsets.push_back(off);
    if (const auto* d = insn.direct()) {
      if (d->absolute_target < 0 || d->absolute_target >= static_cast<std::int64_t>(code.size()))
        r.external_targets.push_back(d->absolute_target);
    }
    if (is_call(insn.kind) && insn.end() < code.size()) post_call.push_back(insn.end());
    if (insn.kind == InstructionKind::Endbr64) r.endbr64_sites.push_back(off);
    if (detail::is_notrack_branch(insn)) r.notrack_sites.push_back(off);
  }
  detail::sort_unique(post_call);
  for (auto off : post_call)
    if (r.instructions.contains(off)) r.post_call_offsets.push_back(off);
  detail::sort_unique(r.external_targets);
  r.indirect_target_candidates = set_union(r.endbr64_sites, r.post_call_offsets);
  detail::fill_stats(r);
  return r;
}

inline DisassemblyResult cet_disassemble(std::span<const std::uint8_t> code, std::uint64_t region_base,
                                         const OffsetSet& entry_points, const CetOptions& options = {}) {
  if (code.empty()) fail(ErrorCode::Usage, "empty code region");
  DisassemblyResult r;
  r.mode = DisassemblyMode::CetGuided;
  r.region_base = region_base;
  r.region_size = code.size();
  r.instructions = InstructionMap(code.size());
  r.entry_points = entry_points;
  detail::sort_unique(r.entry_points);
  r.endbr64_sites = detail::find_endbr64_sites(code);

  for (auto ep : r.entry_points) {
    if (ep >= code.size())
      fail(ErrorCode::InvalidEntryPoint, "entry point " + std::to_string(ep) + " outside the region");
    if (decode_at(code, ep).kind == InstructionKind::Invalid)
      fail(ErrorCode::InvalidEntryPoint, "entry point " + std::to_string(ep) + " decodes as Invalid");
  }

  // visited[o] marks offsets already pushed, so each offset is decoded once.
  std::vector<bool> visited(code.size(), false);
  std::vector<std::size_t> worklist;
  OffsetSet post_call, invalid, fallback;
  auto push = [&](std::size_t off) {
    if (off < code.size() && !visited[off]) {
      visited[off] = true;
      worklist.push_back(off);
    }
  };
  auto drain = [&] {
    while (!worklist.empty()) {
      std::size_t off = worklist.back();
      worklist.pop_back();
      // Follow the straight-line path from `off` until it terminates or joins
      // code that has already been visited.
      for (;;) {
        const DecodedInstruction insn = decode_at(code, off);
        if (insn.kind == InstructionKind::Invalid) {
          invalid.push_back(off);
          break;
        }
        r.instructions.insert(insn);
        if (const auto* d = insn.direct()) {
          if (d->absolute_target >= 0 && d->absolute_target < static_cast<std::int64_t>(code.size()))
            push(static_cast<std::size_t>(d->absolute_target));
          else
            r.external_targets.push_back(d->absolute_target);
        }
        if (detail::is_notrack_branch(insn)) r.notrack_sites.push_back(off);
        if (is_terminator(insn.kind)) break;
        if (insn.end() >= code.size()) {
          r.off_end_offsets.push_back(off);
          break;
        }
        if (is_call(insn.kind)) post_call.push_back(insn.end());
        const std::size_t next = insn.end();
        if (visited[next]) break;
        visited[next] = true;
        off = next;
      }
    }
  };

  for (auto ep : r.entry_points) push(ep);
  for (auto site : r.endbr64_sites) push(site);
  drain();

  // NOTRACK fallback. Newly reached code can hold further NOTRACK sites, so
  // iterate until no new site appears.
  std::vector<bool> in_fallback(code.size(), false);
  if (options.notrack != NotrackPolicy::Warn) {
    std::vector<bool> site_done(code.size(), false);
    for (;;) {
      detail::sort_unique(r.notrack_sites);
      std::vector<std::size_t> fresh;
      for (auto site : r.notrack_sites)
        if (!site_done[site]) {
          site_done[site] = true;
          fresh.push_back(site);
        }
      if (fresh.empty()) break;
      for (auto site : fresh) {
        std::size_t lo = 0, hi = code.size();
        if (options.notrack == NotrackPolicy::FallbackFunction) {
          auto it = std::upper_bound(r.endbr64_sites.begin(), r.endbr64_sites.end(), site);
          if (it != r.endbr64_sites.end()) hi = *it;
          if (it != r.endbr64_sites.begin()) lo = *std::prev(it);
        }
        for (std::size_t o = lo; o < hi; ++o) {
          if (in_fallback[o]) continue;
          in_fallback[o] = true;
          fallback.push_back(o);
          push(o);
        }
      }
      drain();
    }
  }
  detail::sort_unique(r.notrack_sites);
  for (auto site : r.notrack_sites) {
    std::string msg = "NOTRACK indirect branch at offset " + std::to_string(site);
    if (options.notrack == NotrackPolicy::Warn) msg += ": targets are not seeded";
    r.warnings.push_back(std::move(msg));
  }

  r.instructions.finalize();
  detail::sort_unique(invalid);
  r.invalid_offsets = std::move(invalid);
  detail::sort_unique(r.off_end_offsets);
  detail::sort_unique(r.external_targets);
  detail::sort_unique(post_call);
  for (auto off : post_call)
    if (r.instructions.contains(off)) r.post_call_offsets.push_back(off);
  detail::sort_unique(fallback);
  for (auto off : fallback)
    if (r.instructions.contains(off)) r.notrack_fallback_offsets.push_back(off);
  r.seeds = set_union(set_union(r.entry_points, r.endbr64_sites), fallback);
  r.indirect_target_candidates =
      set_union(set_union(r.endbr64_sites, r.post_call_offsets), r.notrack_fallback_offsets);
  detail::fill_stats(r);
  return r;
}

struct ComparisonReport {
  CountsReport superset;
  CountsReport cet;
  double ratio = 0.0;  // cet.total / superset.total
  // Superset offsets that CET-guided disassembly pruned.
  OffsetSet difference;
  // CET offsets missing from the superset result or decoded differently.
  // Always empty for results produced by this module.
  OffsetSet subset_violations;

  bool subset_holds() const { return subset_violations.empty(); }
};

inline ComparisonReport compare_modes(const DisassemblyResult& sup, const DisassemblyResult& cet) {
  if (sup.region_base != cet.region_base || sup.region_size != cet.region_size)
    fail(ErrorCode::RegionMismatch, "results cover different regions");
  ComparisonReport rep;
  rep.superset = sup.stats;
  rep.cet = cet.stats;
  rep.ratio = sup.stats.total_instructions == 0
                  ? 1.0
                  : static_cast<double>(cet.stats.total_instructions) /
                        static_cast<double>(sup.stats.total_instructions);
  for (const auto& insn : cet.instructions) {
    const auto* other = sup.instructions.find(insn.offset);
    if (!other || !(*other == insn)) rep.subset_violations.push_back(insn.offset);
  }
  for (const auto& insn : sup.instructions)
    if (!cet.instructions.contains(insn.offset)) rep.difference.push_back(insn.offset);
  return rep;
}

}  // namespace tva
