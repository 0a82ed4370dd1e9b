#pragma once

// Analysis report: per-mode instruction counts and size accounting for one
// binary, serialized as deterministic `key = value` lines. Timing values are
// kept out of the main block so that reports of identical inputs compare
// byte for byte.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "tva/disassemble.hpp"
#include "tva/elf.hpp"
#include "tva/error.hpp"

namespace tva {

constexpr std::string_view mode_name(DisassemblyMode m) {
  return m == DisassemblyMode::Superset ? "superset" : "cet";
}

struct ModeReport {
  DisassemblyMode mode = DisassemblyMode::Superset;
  CountsReport counts;
  std::size_t mapping_candidates = 0;
  std::size_t notrack_sites = 0;
  // Size accounting of a null-pass rewrite; empty when the rewrite failed.
  std::optional<std::uint64_t> new_text_size;  // code + stubs + tables
  std::optional<std::uint64_t> new_file_size;
  std::string rewrite_error;
  double disassembly_seconds = 0.0;
};

struct ModeComparison {
  double ratio = 0.0;
  std::size_t pruned = 0;
  bool subset_holds = false;
};

struct AnalyzeReport {
  std::string binary;
  bool is_pie = false;
  std::uint64_t text_vaddr = 0;
  std::uint64_t text_size = 0;
  std::uint64_t file_size = 0;
  std::vector<ModeReport> modes;
  std::optional<ModeComparison> comparison;  // present when both modes ran
};

struct AnalyzeOptions {
  std::vector<DisassemblyMode> modes{DisassemblyMode::Superset, DisassemblyMode::CetGuided};
  bool rewrite_sizes = true;
  RewriteOptions rewrite;  // mode and passes are overridden (null pass)
};

inline AnalyzeReport analyze(const ElfImage& img, std::string name, const AnalyzeOptions& opt = {}) {
  AnalyzeReport rep;
  rep.binary = std::move(name);
  rep.is_pie = img.is_pie;
  rep.text_vaddr = img.text_vaddr;
  rep.text_size = img.text().size();
  rep.file_size = img.bytes.size();
  std::optional<DisassemblyResult> sup, cet;
  for (auto mode : opt.modes) {
    ModeReport m;
    m.mode = mode;
    const auto t0 = std::chrono::steady_clock::now();
    DisassemblyResult d = disassemble_image(img, mode, opt.rewrite.notrack);
    m.disassembly_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    m.counts = d.stats;
    m.mapping_candidates = mode == DisassemblyMode::Superset ? d.instructions.size() : d.indirect_target_candidates.size();
    m.notrack_sites = d.notrack_sites.size();
    if (opt.rewrite_sizes) {
      try {
        RewriteOptions ro = opt.rewrite;
        ro.mode = mode;
        ro.passes.clear();
        const OutputPlan plan = plan_output(img, ro);
        const RewriteOutput out = rewrite_text(img, plan, d);
        m.new_text_size = out.stats.new_text_size;
        m.new_file_size = emit_rewritten(img, out, plan).size();
      } catch (const Error& e) {
        m.rewrite_error = e.what();
      }
    }
    (mode == DisassemblyMode::Superset ? sup : cet) = std::move(d);
    rep.modes.push_back(std::move(m));
  }
  if (sup && cet) {
    const auto c = compare_modes(*sup, *cet);
    rep.comparison = ModeComparison{c.ratio, c.difference.size(), c.subset_holds()};
  }
  return rep;
}

namespace detail {

inline std::string hex(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string fixed6(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace detail

// Deterministic text form. With `timing`, a trailing [timing] block holds
// the wall-clock fields.
inline std::string to_text(const AnalyzeReport& r, bool timing = false) {
  std::string out;
  auto kv = [&](const std::string& k, const std::string& v) { out += k + " = " + v + "\n"; };
  kv("binary", r.binary);
  kv("is_pie", r.is_pie ? "true" : "false");
  kv("text_vaddr", detail::hex(r.text_vaddr));
  kv("original.text_size", std::to_string(r.text_size));
  kv("original.file_size", std::to_string(r.file_size));
  for (const auto& m : r.modes) {
    const std::string p(mode_name(m.mode));
    kv(p + ".instructions", std::to_string(m.counts.total_instructions));
    kv(p + ".direct_call", std::to_string(m.counts.direct_call));
    kv(p + ".direct_jump", std::to_string(m.counts.direct_jump));
    kv(p + ".indirect_call", std::to_string(m.counts.indirect_call));
    kv(p + ".indirect_jump", std::to_string(m.counts.indirect_jump));
    kv(p + ".conditional_jump", std::to_string(m.counts.conditional_jump));
    kv(p + ".mapping_candidates", std::to_string(m.mapping_candidates));
    kv(p + ".notrack_sites", std::to_string(m.notrack_sites));
    if (m.new_text_size) kv(p + ".new.text_size", std::to_string(*m.new_text_size));
    if (m.new_file_size) kv(p + ".new.file_size", std::to_string(*m.new_file_size));
    if (!m.rewrite_error.empty()) kv(p + ".rewrite_error", m.rewrite_error);
  }
  if (r.comparison) {
    kv("compare.ratio", detail::fixed6(r.comparison->ratio));
    kv("compare.pruned", std::to_string(r.comparison->pruned));
    kv("compare.subset_holds", r.comparison->subset_holds ? "true" : "false");
  }
  if (timing) {
    out += "[timing]\n";
    for (const auto& m : r.modes) kv(std::string(mode_name(m.mode)) + ".disassembly_seconds", detail::fixed6(m.disassembly_seconds));
  }
  return out;
}

}  // namespace tva
