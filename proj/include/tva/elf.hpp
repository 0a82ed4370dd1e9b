#pragma once

// ELF64 x86-64 input parsing, output planning, emission of the rewritten
// image and static verification of a rewritten file against its original.
//
// Output layout. The original file bytes are kept; two PT_LOAD segments are
// appended after them:
//  * the table segment (R): RegionTable at +0, metadata at +0x800, mapping
//    table at +0x1000. For ET_EXEC it is linked at the table address itself;
//    for PIE it follows the image and the runtime copies the RegionTable to
//    the table address at startup.
//  * the code segment (R+X): the new program header table, the new text
//    (code, trap, lookup stubs) and the bootstrap, which becomes e_entry.
// The original text segment keeps its bytes (data reads still reach them)
// but loses PF_X, the PT_PHDR entry is moved to the new table and
// PT_GNU_PROPERTY is turned into PT_NULL so no CET hardware enforcement is
// requested for code that now returns through jumps.

#include <elf.h>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tva/address_map.hpp"
#include "tva/bootstrap.hpp"
#include "tva/decode.hpp"
#include "tva/disassemble.hpp"
#include "tva/error.hpp"
#include "tva/passes.hpp"
#include "tva/rewrite.hpp"

namespace tva {

struct ElfSegment {
  std::uint32_t type = 0;
  std::uint32_t flags = 0;
  std::uint64_t offset = 0;
  std::uint64_t vaddr = 0;
  std::uint64_t paddr = 0;
  std::uint64_t filesz = 0;
  std::uint64_t memsz = 0;
  std::uint64_t align = 0;

  bool load() const { return type == PT_LOAD; }
  bool executable() const { return (flags & PF_X) != 0; }
  friend bool operator==(const ElfSegment&, const ElfSegment&) = default;
};

struct ElfSection {
  std::string name;
  std::uint32_t type = 0;
  std::uint64_t flags = 0;
  std::uint64_t vaddr = 0;
  std::uint64_t offset = 0;
  std::uint64_t size = 0;
};

struct ElfImage {
  std::vector<std::uint8_t> bytes;
  std::uint16_t type = 0;
  bool is_pie = false;
  std::uint64_t entry_point = 0;
  std::vector<ElfSegment> segments;
  std::vector<ElfSection> sections;

  // The executable PT_LOAD containing the entry point.
  std::size_t text_segment = 0;
  std::uint64_t text_vaddr = 0;
  std::span<const std::uint8_t> text() const {
    const auto& s = segments[text_segment];
    return {bytes.data() + s.offset, static_cast<std::size_t>(s.filesz)};
  }

  // Code addresses named by the file: symbol table functions, DT_INIT /
  // DT_FINI, init/fini array slots and R_X86_64_RELATIVE addends that land
  // in the text region.
  std::vector<std::uint64_t> code_addresses;
  // Dynamic relocations (r_offset) and DT_TEXTREL / DF_TEXTREL.
  std::vector<std::uint64_t> dynamic_relocation_offsets;
  bool text_relocations = false;

  bool text_contains(std::uint64_t vaddr) const { return vaddr - text_vaddr < text().size(); }

  // File offset of a mapped vaddr range, or nullopt when it is not file backed.
  std::optional<std::uint64_t> file_offset(std::uint64_t vaddr, std::uint64_t size = 1) const {
    for (const auto& s : segments)
      if (s.load() && vaddr >= s.vaddr && vaddr - s.vaddr + size <= s.filesz) return s.offset + (vaddr - s.vaddr);
    return std::nullopt;
  }
};

namespace detail {

template <class T>
T read_struct(std::span<const std::uint8_t> bytes, std::uint64_t at, std::string_view what) {
  if (at > bytes.size() || bytes.size() - at < sizeof(T))
    fail(ErrorCode::MalformedHeaders, std::string(what) + " lies outside the file");
  T v;
  std::memcpy(&v, bytes.data() + at, sizeof(T));
  return v;
}

template <class T>
void write_struct(std::vector<std::uint8_t>& bytes, std::uint64_t at, const T& v) {
  std::memcpy(bytes.data() + at, &v, sizeof(T));
}

inline std::uint64_t read_u64(std::span<const std::uint8_t> bytes, std::uint64_t at) {
  return read_struct<std::uint64_t>(bytes, at, "value");
}

inline void parse_dynamic(ElfImage& img) {
  const std::span<const std::uint8_t> bytes = img.bytes;
  std::optional<std::uint64_t> rela, relasz, jmprel, pltrelsz, rel, relsz, init_array, init_arraysz, fini_array,
      fini_arraysz;
  for (const auto& seg : img.segments) {
    if (seg.type != PT_DYNAMIC) continue;
    for (std::uint64_t at = seg.offset; at + sizeof(Elf64_Dyn) <= seg.offset + seg.filesz; at += sizeof(Elf64_Dyn)) {
      const auto d = read_struct<Elf64_Dyn>(bytes, at, "dynamic entry");
      if (d.d_tag == DT_NULL) break;
      const std::uint64_t v = d.d_un.d_val;
      switch (d.d_tag) {
        case DT_INIT:
        case DT_FINI: img.code_addresses.push_back(v); break;
        case DT_RELA: rela = v; break;
        case DT_RELASZ: relasz = v; break;
        case DT_JMPREL: jmprel = v; break;
        case DT_PLTRELSZ: pltrelsz = v; break;
        case DT_REL: rel = v; break;
        case DT_RELSZ: relsz = v; break;
        case DT_INIT_ARRAY: init_array = v; break;
        case DT_INIT_ARRAYSZ: init_arraysz = v; break;
        case DT_FINI_ARRAY: fini_array = v; break;
        case DT_FINI_ARRAYSZ: fini_arraysz = v; break;
        case DT_TEXTREL: img.text_relocations = true; break;
        case DT_FLAGS:
          if (v & DF_TEXTREL) img.text_relocations = true;
          break;
        default: break;
      }
    }
  }
  auto relocs = [&](std::optional<std::uint64_t> addr, std::optional<std::uint64_t> size, std::size_t stride,
                    bool with_addend) {
    if (!addr || !size) return;
    const auto off = img.file_offset(*addr, *size);
    if (!off) fail(ErrorCode::MalformedHeaders, "dynamic relocation table is not file backed");
    for (std::uint64_t at = *off; at + stride <= *off + *size; at += stride) {
      if (with_addend) {
        const auto r = read_struct<Elf64_Rela>(bytes, at, "relocation");
        img.dynamic_relocation_offsets.push_back(r.r_offset);
        const auto t = ELF64_R_TYPE(r.r_info);
        if (t == R_X86_64_RELATIVE || t == R_X86_64_IRELATIVE)
          img.code_addresses.push_back(static_cast<std::uint64_t>(r.r_addend));
      } else {
        const auto r = read_struct<Elf64_Rel>(bytes, at, "relocation");
        img.dynamic_relocation_offsets.push_back(r.r_offset);
      }
    }
  };
  relocs(rela, relasz, sizeof(Elf64_Rela), true);
  relocs(jmprel, pltrelsz, sizeof(Elf64_Rela), true);
  relocs(rel, relsz, sizeof(Elf64_Rel), false);
  auto array = [&](std::optional<std::uint64_t> addr, std::optional<std::uint64_t> size) {
    if (!addr || !size) return;
    const auto off = img.file_offset(*addr, *size);
    if (!off) return;
    for (std::uint64_t at = *off; at + 8 <= *off + *size; at += 8) img.code_addresses.push_back(read_u64(bytes, at));
  };
  array(init_array, init_arraysz);
  array(fini_array, fini_arraysz);
}

inline void parse_sections(ElfImage& img, const Elf64_Ehdr& eh) {
  const std::span<const std::uint8_t> bytes = img.bytes;
  if (eh.e_shoff == 0 || eh.e_shnum == 0) return;
  if (eh.e_shentsize != sizeof(Elf64_Shdr)) fail(ErrorCode::MalformedHeaders, "unexpected section header size");
  std::vector<Elf64_Shdr> sh;
  for (std::uint16_t i = 0; i < eh.e_shnum; ++i)
    sh.push_back(read_struct<Elf64_Shdr>(bytes, eh.e_shoff + std::uint64_t{i} * sizeof(Elf64_Shdr), "section header"));
  std::span<const std::uint8_t> names;
  if (eh.e_shstrndx < sh.size() && sh[eh.e_shstrndx].sh_type == SHT_STRTAB) {
    const auto& s = sh[eh.e_shstrndx];
    if (s.sh_offset <= bytes.size() && bytes.size() - s.sh_offset >= s.sh_size)
      names = bytes.subspan(s.sh_offset, s.sh_size);
  }
  auto name_at = [](std::span<const std::uint8_t> strtab, std::uint64_t at) {
    std::string out;
    for (std::uint64_t i = at; i < strtab.size() && strtab[i]; ++i) out.push_back(static_cast<char>(strtab[i]));
    return out;
  };
  for (const auto& s : sh) img.sections.push_back({name_at(names, s.sh_name), s.sh_type, s.sh_flags, s.sh_addr, s.sh_offset, s.sh_size});
  for (const auto& s : sh) {
    if (s.sh_type != SHT_SYMTAB && s.sh_type != SHT_DYNSYM) continue;
    if (s.sh_entsize != sizeof(Elf64_Sym) || s.sh_offset > bytes.size() || bytes.size() - s.sh_offset < s.sh_size) continue;
    for (std::uint64_t at = s.sh_offset; at + sizeof(Elf64_Sym) <= s.sh_offset + s.sh_size; at += sizeof(Elf64_Sym)) {
      const auto sym = read_struct<Elf64_Sym>(bytes, at, "symbol");
      const auto t = ELF64_ST_TYPE(sym.st_info);
      if ((t == STT_FUNC || t == STT_GNU_IFUNC) && sym.st_shndx != SHN_UNDEF && sym.st_value != 0)
        img.code_addresses.push_back(sym.st_value);
    }
  }
}

}  // namespace detail

// UnsupportedClass: not ELF64 little-endian x86-64 ET_EXEC/ET_DYN.
// MalformedHeaders: truncated or inconsistent headers.
// NoExecutableSegment: no executable PT_LOAD contains the entry point.
inline ElfImage load_elf(std::vector<std::uint8_t> bytes) {
  ElfImage img;
  img.bytes = std::move(bytes);
  const std::span<const std::uint8_t> b = img.bytes;
  if (b.size() < EI_NIDENT || std::memcmp(b.data(), ELFMAG, SELFMAG) != 0)
    fail(ErrorCode::MalformedHeaders, "missing ELF magic");
  if (b[EI_CLASS] != ELFCLASS64) fail(ErrorCode::UnsupportedClass, "only 64-bit ELF files are supported");
  if (b[EI_DATA] != ELFDATA2LSB) fail(ErrorCode::UnsupportedClass, "only little-endian ELF files are supported");
  const auto eh = detail::read_struct<Elf64_Ehdr>(b, 0, "ELF header");
  if (eh.e_machine != EM_X86_64) fail(ErrorCode::UnsupportedClass, "only x86-64 ELF files are supported");
  if (eh.e_type != ET_EXEC && eh.e_type != ET_DYN)
    fail(ErrorCode::UnsupportedClass, "only executables (ET_EXEC, ET_DYN) are supported");
  if (eh.e_phentsize != sizeof(Elf64_Phdr) || eh.e_phnum == 0)
    fail(ErrorCode::MalformedHeaders, "missing or malformed program header table");
  img.type = eh.e_type;
  img.is_pie = eh.e_type == ET_DYN;
  img.entry_point = eh.e_entry;
  for (std::uint16_t i = 0; i < eh.e_phnum; ++i) {
    const auto ph =
        detail::read_struct<Elf64_Phdr>(b, eh.e_phoff + std::uint64_t{i} * sizeof(Elf64_Phdr), "program header");
    ElfSegment s{ph.p_type, ph.p_flags, ph.p_offset, ph.p_vaddr, ph.p_paddr, ph.p_filesz, ph.p_memsz, ph.p_align};
    if (s.load() && (s.offset > b.size() || b.size() - s.offset < s.filesz || s.filesz > s.memsz))
      fail(ErrorCode::MalformedHeaders, "PT_LOAD segment " + std::to_string(i) + " exceeds the file");
    img.segments.push_back(s);
  }
  bool found = false;
  for (std::size_t i = 0; i < img.segments.size(); ++i) {
    const auto& s = img.segments[i];
    if (s.load() && s.executable() && eh.e_entry >= s.vaddr && eh.e_entry - s.vaddr < s.filesz) {
      img.text_segment = i;
      img.text_vaddr = s.vaddr;
      found = true;
      break;
    }
  }
  if (!found) fail(ErrorCode::NoExecutableSegment, "no executable PT_LOAD segment contains the entry point");
  detail::parse_sections(img, eh);
  detail::parse_dynamic(img);
  std::sort(img.code_addresses.begin(), img.code_addresses.end());
  img.code_addresses.erase(std::unique(img.code_addresses.begin(), img.code_addresses.end()), img.code_addresses.end());
  return img;
}

// Entry points for CET-guided disassembly, as text-region offsets: the ELF
// entry plus every named code address that decodes to a valid instruction.
inline OffsetSet default_entry_points(const ElfImage& img) {
  const auto code = img.text();
  OffsetSet out{static_cast<std::size_t>(img.entry_point - img.text_vaddr)};
  for (auto a : img.code_addresses) {
    if (!img.text_contains(a)) continue;
    const auto off = static_cast<std::size_t>(a - img.text_vaddr);
    if (decode_at(code, off).kind != InstructionKind::Invalid) out.push_back(off);
  }
  detail::sort_unique(out);
  return out;
}

enum class LibraryPolicy : std::uint8_t { Ignore, Instrument };

struct RewriteOptions {
  DisassemblyMode mode = DisassemblyMode::CetGuided;
  NotrackPolicy notrack = NotrackPolicy::FallbackFunction;
  std::vector<std::string> passes;  // applied in order; names accepted by make_pass
  int trace_fd = 2;
  // Jump trampolines step past the red zone first. Off by default, which
  // keeps the trampolines as listed; leaf functions that dispatch through a
  // jump table while holding locals below rsp need it.
  bool red_zone_safe = false;
  LibraryPolicy libs = LibraryPolicy::Ignore;
  std::uint64_t table_address = kDefaultTableAddress;
};

inline constexpr std::uint64_t kPageSize = 0x1000;
inline constexpr std::uint64_t kMetadataOffset = 0x800;
inline constexpr std::uint64_t kMappingOffset = 0x1000;
inline constexpr char kMetadataMagic[8] = {'T', 'V', 'A', 'M', 'E', 'T', 'A', '1'};

struct OutputPlan {
  // Table segment.
  std::uint64_t table_segment_vaddr = 0;  // link address
  std::uint64_t table_address = 0;        // run-time RegionTable address
  std::uint64_t metadata_vaddr = 0;
  std::uint64_t mapping_vaddr = 0;
  std::uint64_t table_segment_size = 0;
  // Code segment.
  std::uint64_t code_segment_vaddr = 0;  // program header table lives here
  std::size_t phnum = 0;
  std::uint64_t new_code_vaddr = 0;  // new_base
  // Fixed run-time state page (shadow-stack control block).
  std::uint64_t state_address = 0;
  // The init hook is an entry-point wrapper: e_entry points at the bootstrap.
  std::uint32_t original_text_flags = PF_R;
  RewriteOptions options;
};

namespace detail {

inline bool overlaps(std::uint64_t a, std::uint64_t asz, std::uint64_t b, std::uint64_t bsz) {
  return a < b + bsz && b < a + asz;
}

inline std::uint64_t image_end(const ElfImage& img) {
  std::uint64_t end = 0;
  for (const auto& s : img.segments)
    if (s.load()) end = std::max(end, s.vaddr + s.memsz);
  return end;
}

}  // namespace detail

// LayoutCollision: the fixed run-time addresses overlap the image.
// RelocationConflict: dynamic relocations patch the text that moves.
// NotSupported: instrumenting shared libraries.
inline OutputPlan plan_output(const ElfImage& img, const RewriteOptions& opt) {
  if (opt.libs == LibraryPolicy::Instrument)
    fail(ErrorCode::NotSupported, "rewriting shared libraries is not supported; use --libs ignore");
  if (img.text_relocations) fail(ErrorCode::RelocationConflict, "the input has text relocations");
  for (auto r : img.dynamic_relocation_offsets)
    if (img.text_contains(r))
      fail(ErrorCode::RelocationConflict, "a dynamic relocation patches text at 0x" + std::to_string(r));
  if (opt.table_address % kPageSize != 0 || opt.table_address < 0x10000 || opt.table_address >= 0x7fff0000)
    fail(ErrorCode::Usage, "table address must be page aligned and in [0x10000, 0x7fff0000)");

  OutputPlan p;
  p.options = opt;
  const std::uint64_t old_size = img.text().size();
  p.table_segment_size = kMappingOffset + 4 * old_size;
  p.table_address = opt.table_address;
  p.state_address = opt.table_address - 0x10000;
  p.phnum = img.segments.size() + 2;
  const std::uint64_t end = detail::align_up(detail::image_end(img), kPageSize);
  if (img.is_pie) {
    p.table_segment_vaddr = end;
    p.code_segment_vaddr = detail::align_up(end + p.table_segment_size, kPageSize);
  } else {
    p.table_segment_vaddr = opt.table_address;
    p.code_segment_vaddr = end;
  }
  p.metadata_vaddr = p.table_segment_vaddr + kMetadataOffset;
  p.mapping_vaddr = p.table_segment_vaddr + kMappingOffset;
  p.new_code_vaddr = detail::align_up(p.code_segment_vaddr + p.phnum * sizeof(Elf64_Phdr), 16);

  for (const auto& s : img.segments) {
    if (!s.load()) continue;
    if (detail::overlaps(s.vaddr, s.memsz, p.state_address, kStatePageSize))
      fail(ErrorCode::LayoutCollision, "the runtime state page overlaps a segment of the input");
    if (!img.is_pie && detail::overlaps(s.vaddr, s.memsz, p.table_segment_vaddr, p.table_segment_size))
      fail(ErrorCode::LayoutCollision, "the table segment overlaps a segment of the input");
  }
  if (detail::overlaps(p.table_segment_vaddr, p.table_segment_size, p.state_address, kStatePageSize))
    fail(ErrorCode::LayoutCollision, "the table segment overlaps the runtime state page");
  return p;
}

struct ElfRewriteResult {
  OutputPlan plan;
  DisassemblyResult disasm;
  RewriteOutput rewrite;
  std::uint64_t bootstrap_vaddr = 0;
  std::vector<std::uint8_t> bootstrap;
  std::vector<std::uint8_t> bytes;  // the output file
};

inline PassList build_passes(const OutputPlan& plan) {
  PassOptions po;
  po.shadow_control_address = plan.state_address + kStateShadowTop;
  po.trace_sink = TraceFdSink{plan.options.trace_fd};
  PassList out;
  for (const auto& name : plan.options.passes) out.push_back(make_pass(name, po));
  return out;
}

inline DisassemblyResult disassemble_image(const ElfImage& img, DisassemblyMode mode,
                                           NotrackPolicy notrack = NotrackPolicy::FallbackFunction) {
  if (mode == DisassemblyMode::Superset) return superset_disassemble(img.text(), img.text_vaddr);
  return cet_disassemble(img.text(), img.text_vaddr, default_entry_points(img), CetOptions{notrack});
}

inline bool has_pass(const OutputPlan& plan, std::string_view name) {
  return std::find(plan.options.passes.begin(), plan.options.passes.end(), name) != plan.options.passes.end();
}

inline std::string join_passes(const std::vector<std::string>& passes) {
  std::string s;
  for (const auto& p : passes) s += (s.empty() ? "" : ",") + p;
  return s;
}

// Runs disassembly and the rewriter for an image under a plan.
inline RewriteOutput rewrite_text(const ElfImage& img, const OutputPlan& plan, const DisassemblyResult& disasm) {
  RewriteConfig cfg;
  cfg.new_base = plan.new_code_vaddr;
  cfg.mapping_table_vaddr = plan.mapping_vaddr;
  cfg.table_address = plan.table_address;
  cfg.red_zone_safe = plan.options.red_zone_safe;
  cfg.extra_regions.push_back({0, 0, ~std::uint64_t{0}});
  return rewrite(disasm, img.text(), build_passes(plan), cfg);
}

// Assembles the output file. `out` must come from rewrite_text with `plan`.
inline std::vector<std::uint8_t> emit_rewritten(const ElfImage& img, const RewriteOutput& out, const OutputPlan& plan,
                                                std::uint64_t* bootstrap_vaddr_out = nullptr,
                                                std::vector<std::uint8_t>* bootstrap_out = nullptr) {
  if (out.new_base != plan.new_code_vaddr || out.old_base != img.text_vaddr)
    fail(ErrorCode::Usage, "rewrite output does not belong to this plan");
  const std::uint64_t old_size = img.text().size();
  const std::uint64_t entry_off = img.entry_point - img.text_vaddr;

  BootstrapParams bp;
  bp.vaddr = detail::align_up(out.new_base + out.new_text.size(), 16);
  bp.is_pie = img.is_pie;
  bp.old_base = img.text_vaddr;
  bp.old_size = old_size;
  bp.new_base = out.new_base;
  bp.mapping_vaddr = plan.mapping_vaddr;
  bp.trap_vaddr = out.trap_vaddr;
  bp.entry_new = out.translate(static_cast<std::size_t>(entry_off));
  bp.regions = out.region_table;
  bp.table_link_vaddr = plan.table_segment_vaddr;
  bp.state_address = plan.state_address;
  bp.shadow_stack = has_pass(plan, "shadow-stack");
  const auto boot = build_bootstrap(bp);

  const std::uint64_t code_size = bp.vaddr + boot.size() - plan.code_segment_vaddr;
  if (!img.is_pie && detail::overlaps(plan.code_segment_vaddr, code_size, plan.table_segment_vaddr, plan.table_segment_size))
    fail(ErrorCode::LayoutCollision, "the new code segment runs into the table segment");
  if (detail::overlaps(plan.code_segment_vaddr, code_size, plan.state_address, kStatePageSize))
    fail(ErrorCode::LayoutCollision, "the new code segment overlaps the runtime state page");

  // Table segment contents.
  std::vector<std::uint8_t> table(plan.table_segment_size, 0);
  const auto regions = out.region_table.serialize();
  if (regions.size() > kMetadataOffset) fail(ErrorCode::Overflow, "region table does not fit its page");
  std::copy(regions.begin(), regions.end(), table.begin());
  {
    std::vector<std::uint8_t> meta(kMappingOffset - kMetadataOffset, 0);
    std::memcpy(meta.data(), kMetadataMagic, 8);
    meta[8] = 1;  // version
    meta[12] = static_cast<std::uint8_t>(plan.options.mode);
    meta[13] = static_cast<std::uint8_t>(plan.options.notrack);
    meta[14] = plan.options.red_zone_safe;
    meta[15] = img.is_pie;
    const std::uint64_t fields[] = {img.text_vaddr, old_size,         out.new_base,       out.new_text.size(),
                                    plan.mapping_vaddr, bp.vaddr,      boot.size(),        out.trap_vaddr,
                                    plan.table_address, plan.state_address, img.entry_point};
    for (std::size_t i = 0; i < std::size(fields); ++i) detail::put_u64(meta, 16 + 8 * i, fields[i]);
    const auto fd = static_cast<std::uint32_t>(plan.options.trace_fd);
    std::memcpy(meta.data() + 104, &fd, 4);
    const std::string passes = join_passes(plan.options.passes);
    if (passes.size() > meta.size() - 113) fail(ErrorCode::Usage, "pass list too long");
    const auto len = static_cast<std::uint32_t>(passes.size());
    std::memcpy(meta.data() + 108, &len, 4);
    std::memcpy(meta.data() + 112, passes.data(), passes.size());
    std::copy(meta.begin(), meta.end(), table.begin() + kMetadataOffset);
  }
  if (out.mapping_bytes.size() != 4 * old_size) fail(ErrorCode::Usage, "mapping size does not match the text");
  std::copy(out.mapping_bytes.begin(), out.mapping_bytes.end(), table.begin() + kMappingOffset);

  // File layout.
  std::vector<std::uint8_t> file = img.bytes;
  const std::uint64_t base_off = detail::align_up(file.size(), kPageSize);
  std::uint64_t table_off, code_off;
  if (img.is_pie) {
    table_off = base_off;
    code_off = base_off + (plan.code_segment_vaddr - plan.table_segment_vaddr);
  } else {
    code_off = base_off;
    table_off = detail::align_up(base_off + code_size, kPageSize);
  }
  file.resize(std::max(table_off + table.size(), code_off + code_size), 0);
  std::copy(table.begin(), table.end(), file.begin() + static_cast<std::ptrdiff_t>(table_off));

  // Program headers.
  std::vector<ElfSegment> segs = img.segments;
  segs[img.text_segment].flags = (segs[img.text_segment].flags & ~std::uint32_t{PF_X}) | plan.original_text_flags;
  const std::uint64_t phdr_size = plan.phnum * sizeof(Elf64_Phdr);
  for (auto& s : segs) {
    if (s.type == PT_PHDR) {
      s.offset = code_off;
      s.vaddr = s.paddr = plan.code_segment_vaddr;
      s.filesz = s.memsz = phdr_size;
      s.align = 8;
    } else if (s.type == PT_GNU_PROPERTY) {
      s = ElfSegment{};
    }
  }
  const ElfSegment code_seg{PT_LOAD, PF_R | PF_X, code_off, plan.code_segment_vaddr, plan.code_segment_vaddr,
                            code_size, code_size, kPageSize};
  const ElfSegment table_seg{PT_LOAD, PF_R, table_off, plan.table_segment_vaddr, plan.table_segment_vaddr,
                             table.size(), table.size(), kPageSize};
  std::size_t last_load = 0;
  for (std::size_t i = 0; i < segs.size(); ++i)
    if (segs[i].load()) last_load = i;
  segs.insert(segs.begin() + static_cast<std::ptrdiff_t>(last_load + 1), {code_seg, table_seg});
  // PT_LOAD entries must be sorted by vaddr.
  std::vector<std::size_t> load_slots;
  std::vector<ElfSegment> loads;
  for (std::size_t i = 0; i < segs.size(); ++i)
    if (segs[i].load()) {
      load_slots.push_back(i);
      loads.push_back(segs[i]);
    }
  std::stable_sort(loads.begin(), loads.end(), [](const auto& a, const auto& b) { return a.vaddr < b.vaddr; });
  for (std::size_t i = 0; i < loads.size(); ++i) segs[load_slots[i]] = loads[i];

  for (std::size_t i = 0; i < segs.size(); ++i) {
    const auto& s = segs[i];
    Elf64_Phdr ph{s.type, s.flags, s.offset, s.vaddr, s.paddr, s.filesz, s.memsz, s.align};
    detail::write_struct(file, code_off + i * sizeof(Elf64_Phdr), ph);
  }
  const std::uint64_t text_off = code_off + (out.new_base - plan.code_segment_vaddr);
  std::copy(out.new_text.begin(), out.new_text.end(), file.begin() + static_cast<std::ptrdiff_t>(text_off));
  std::fill(file.begin() + static_cast<std::ptrdiff_t>(text_off + out.new_text.size()),
            file.begin() + static_cast<std::ptrdiff_t>(code_off + (bp.vaddr - plan.code_segment_vaddr)), 0xF4);
  std::copy(boot.begin(), boot.end(), file.begin() + static_cast<std::ptrdiff_t>(code_off + (bp.vaddr - plan.code_segment_vaddr)));

  auto eh = detail::read_struct<Elf64_Ehdr>(file, 0, "ELF header");
  eh.e_entry = bp.vaddr;
  eh.e_phoff = code_off;
  if (segs.size() >= PN_XNUM) fail(ErrorCode::Overflow, "too many program headers");
  eh.e_phnum = static_cast<std::uint16_t>(segs.size());
  detail::write_struct(file, 0, eh);

  if (bootstrap_vaddr_out) *bootstrap_vaddr_out = bp.vaddr;
  if (bootstrap_out) *bootstrap_out = boot;
  return file;
}

// Full pipeline: plan, disassemble, rewrite, emit.
inline ElfRewriteResult rewrite_elf(const ElfImage& img, const RewriteOptions& opt) {
  ElfRewriteResult r;
  r.plan = plan_output(img, opt);
  r.disasm = disassemble_image(img, opt.mode, opt.notrack);
  r.rewrite = rewrite_text(img, r.plan, r.disasm);
  r.bytes = emit_rewritten(img, r.rewrite, r.plan, &r.bootstrap_vaddr, &r.bootstrap);
  return r;
}

// --- verification ---

struct RewriteMetadata {
  DisassemblyMode mode = DisassemblyMode::CetGuided;
  NotrackPolicy notrack = NotrackPolicy::FallbackFunction;
  bool red_zone_safe = false;
  bool is_pie = false;
  std::uint64_t old_base = 0, old_size = 0, new_base = 0, new_text_size = 0, mapping_vaddr = 0,
                bootstrap_vaddr = 0, bootstrap_size = 0, trap_vaddr = 0, table_address = 0, state_address = 0,
                original_entry = 0;
  int trace_fd = 2;
  std::vector<std::string> passes;
  std::uint64_t table_segment_vaddr = 0;
};

// Finds the metadata block of a rewritten image (nullopt for other files).
inline std::optional<RewriteMetadata> read_metadata(const ElfImage& img) {
  for (const auto& s : img.segments) {
    if (!s.load() || s.executable() || s.filesz < kMappingOffset) continue;
    const auto* m = img.bytes.data() + s.offset + kMetadataOffset;
    if (std::memcmp(m, kMetadataMagic, 8) != 0 || m[8] != 1) continue;
    const std::span<const std::uint8_t> meta(m, kMappingOffset - kMetadataOffset);
    RewriteMetadata md;
    if (meta[12] > 1 || meta[13] > 2) return std::nullopt;
    md.mode = static_cast<DisassemblyMode>(meta[12]);
    md.notrack = static_cast<NotrackPolicy>(meta[13]);
    md.red_zone_safe = meta[14] != 0;
    md.is_pie = meta[15] != 0;
    std::uint64_t* fields[] = {&md.old_base,        &md.old_size,     &md.new_base,     &md.new_text_size,
                               &md.mapping_vaddr,   &md.bootstrap_vaddr, &md.bootstrap_size, &md.trap_vaddr,
                               &md.table_address,   &md.state_address, &md.original_entry};
    for (std::size_t i = 0; i < std::size(fields); ++i) *fields[i] = detail::get_u64(meta, 16 + 8 * i);
    std::uint32_t fd, len;
    std::memcpy(&fd, m + 104, 4);
    std::memcpy(&len, m + 108, 4);
    md.trace_fd = static_cast<int>(fd);
    if (len > meta.size() - 113) return std::nullopt;
    std::string passes(reinterpret_cast<const char*>(m + 112), len);
    for (std::size_t at = 0; at < passes.size();) {
      const auto comma = passes.find(',', at);
      md.passes.push_back(passes.substr(at, comma == std::string::npos ? std::string::npos : comma - at));
      if (comma == std::string::npos) break;
      at = comma + 1;
    }
    md.table_segment_vaddr = s.vaddr;
    return md;
  }
  return std::nullopt;
}

struct VerificationCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerificationReport {
  std::vector<VerificationCheck> checks;
  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
  }
  const VerificationCheck* find(std::string_view name) const {
    for (const auto& c : checks)
      if (c.name == name) return &c;
    return nullptr;
  }
};

inline constexpr std::string_view kCheckNames[] = {"exec-flag-cleared", "mapping-well-formed", "direct-branches",
                                                   "endbr64-mapped", "entry-in-runtime"};

// Static checks of `rewritten` against `original`. Failures are report
// entries; ParseFailure is raised only when a file does not parse.
inline VerificationReport verify(std::span<const std::uint8_t> original, std::span<const std::uint8_t> rewritten) {
  auto parse = [](std::span<const std::uint8_t> b, const char* which) {
    try {
      return load_elf(std::vector<std::uint8_t>(b.begin(), b.end()));
    } catch (const Error& e) {
      fail(ErrorCode::ParseFailure, std::string(which) + ": " + e.what());
    }
  };
  const ElfImage orig = parse(original, "original");
  const ElfImage rw = parse(rewritten, "rewritten");
  VerificationReport rep;
  auto add = [&](std::string_view name, bool ok, std::string detail) {
    rep.checks.push_back({std::string(name), ok, ok ? "ok" : std::move(detail)});
  };

  // Execute flag on the original text.
  {
    bool cleared = true;
    bool covered = false;
    for (const auto& s : rw.segments)
      if (s.load() && detail::overlaps(s.vaddr, s.filesz, orig.text_vaddr, orig.text().size())) {
        covered = true;
        cleared &= !s.executable();
      }
    add(kCheckNames[0], covered && cleared,
        covered ? "a segment covering the original text is still executable" : "original text is not covered");
  }

  const auto md = read_metadata(rw);
  if (!md) {
    for (std::size_t i = 1; i < std::size(kCheckNames); ++i) add(kCheckNames[i], false, "no rewrite metadata found");
    return rep;
  }
  const auto mapping_off = rw.file_offset(md->mapping_vaddr, md->old_size * 4);
  const auto text_off = rw.file_offset(md->new_base, md->new_text_size);
  std::vector<std::uint32_t> entries;
  if (mapping_off) {
    entries.resize(md->old_size);
    std::memcpy(entries.data(), rw.bytes.data() + *mapping_off, md->old_size * 4);
  }

  // Reproduce the rewrite from the original.
  std::optional<RewriteOutput> repro;
  std::string repro_error;
  if (md->old_base != orig.text_vaddr || md->old_size != orig.text().size()) {
    repro_error = "original text does not match the rewritten metadata";
  } else {
    try {
      OutputPlan plan;
      plan.options.mode = md->mode;
      plan.options.notrack = md->notrack;
      plan.options.red_zone_safe = md->red_zone_safe;
      plan.options.passes = md->passes;
      plan.options.trace_fd = md->trace_fd;
      plan.options.table_address = md->table_address;
      plan.table_address = md->table_address;
      plan.state_address = md->state_address;
      plan.mapping_vaddr = md->mapping_vaddr;
      plan.new_code_vaddr = md->new_base;
      repro = rewrite_text(orig, plan, disassemble_image(orig, md->mode, md->notrack));
    } catch (const Error& e) {
      repro_error = std::string("rewrite of the original failed: ") + e.what();
    }
  }

  // Mapping table shape and content.
  {
    std::string why;
    if (!mapping_off) why = "mapping table is not file backed";
    else if (!text_off) why = "new text is not file backed";
    std::uint32_t prev = 0;
    bool first = true;
    for (std::size_t i = 0; why.empty() && i < entries.size(); ++i) {
      const auto e = entries[i];
      if (e == kSentinel) continue;
      if (e >= md->new_text_size) why = "entry " + std::to_string(i) + " points past the new text";
      else if (!first && e <= prev) why = "entries are not increasing at offset " + std::to_string(i);
      prev = e;
      first = false;
    }
    if (why.empty() && !repro) why = repro_error;
    if (why.empty() && repro->final_mapping.entries != entries) {
      for (std::size_t i = 0; i < entries.size(); ++i)
        if (entries[i] != repro->final_mapping.entries[i]) {
          why = "entry " + std::to_string(i) + " differs from the reproduced mapping";
          break;
        }
    }
    add(kCheckNames[1], why.empty(), why);
  }

  // Direct branches.
  {
    std::string why;
    if (!repro) why = repro_error;
    else if (!text_off) why = "new text is not file backed";
    else if (repro->new_text.size() != md->new_text_size) why = "new text size differs from the reproduction";
    for (std::size_t i = 0; why.empty() && repro && i < repro->branch_fixups.size(); ++i) {
      const auto& f = repro->branch_fixups[i];
      std::int32_t rel;
      std::memcpy(&rel, rw.bytes.data() + *text_off + f.field_offset, 4);
      const std::uint64_t target = md->new_base + f.field_offset + 4 + static_cast<std::uint64_t>(std::int64_t{rel});
      if (target != f.target_vaddr) {
        why = "branch of offset " + std::to_string(f.old_offset) + " reaches the wrong address";
        break;
      }
    }
    add(kCheckNames[2], why.empty(), why);
  }

  // endbr64 sites.
  {
    std::string why;
    if (entries.empty() && md->old_size) why = "mapping table is not file backed";
    const auto code = orig.text();
    for (std::size_t i = 0; why.empty() && i + 4 <= code.size() && i < entries.size(); ++i)
      if (is_endbr64_at(code, i) && entries[i] == kSentinel) why = "endbr64 at offset " + std::to_string(i) + " is unmapped";
    add(kCheckNames[3], why.empty(), why);
  }

  // Entry point.
  {
    const bool ok = rw.entry_point == md->bootstrap_vaddr && rw.entry_point >= md->new_base &&
                    !orig.text_contains(rw.entry_point) && rw.file_offset(rw.entry_point, md->bootstrap_size);
    add(kCheckNames[4], ok, "entry point is not the runtime bootstrap");
  }
  return rep;
}

}  // namespace tva
