#pragma once

// Old-offset to new-offset mapping, its dense table encoding, the region
// registry read by the generated code, and the local/global lookup stubs.
//
// Address conventions used throughout:
//  * old offsets are relative to the original text region (old_base);
//  * new offsets are relative to new_base, the first byte of the rewritten
//    text. The local stub materializes new_base at run time with a
//    RIP-relative lea, so table entries stay valid under any load bias.

#include <cstdint>
#include <cstring>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tva/disassemble.hpp"
#include "tva/error.hpp"
#include "tva/x86_emit.hpp"

namespace tva {

inline constexpr std::uint32_t kSentinel = 0xffffffffu;
inline constexpr std::uint64_t kDefaultTableAddress = 0x56780000;
inline constexpr std::size_t kRegionTableHeaderSize = 0x18;
inline constexpr std::size_t kRegionEntrySize = 24;

struct AddressMapping {
  std::uint64_t old_base = 0;
  std::size_t old_size = 0;
  std::uint64_t new_base = 0;
  // Serialized table: one entry per old offset, kSentinel where no indirect
  // transfer may land.
  std::vector<std::uint32_t> entries;
  // Layout of every instruction of the disassembly (kSentinel for offsets
  // without one). Superset of `entries`; used by pass two for direct
  // branches, which need no table entry.
  std::vector<std::uint32_t> placement;
  // Bytes occupied by the laid-out instructions.
  std::uint64_t laid_out_size = 0;

  std::size_t mapped_count() const {
    std::size_t n = 0;
    for (auto e : entries) n += e != kSentinel;
    return n;
  }

  friend bool operator==(const AddressMapping& a, const AddressMapping& b) {
    return a.old_base == b.old_base && a.old_size == b.old_size && a.new_base == b.new_base &&
           a.entries == b.entries;
  }
};

struct MappingLayout {
  std::uint64_t old_base = 0;
  std::uint64_t new_base = 0;
};

// `new_sizes[i]` is the rewritten size of the i-th instruction of
// `disasm.instructions` in offset order.
inline AddressMapping build_mapping(const DisassemblyResult& disasm, const MappingLayout& layout,
                                    std::span<const std::uint32_t> new_sizes) {
  if (new_sizes.size() != disasm.instructions.size())
    fail(ErrorCode::Usage, "one new size per instruction is required");
  AddressMapping m;
  m.old_base = layout.old_base;
  m.old_size = disasm.region_size;
  m.new_base = layout.new_base;
  m.entries.assign(disasm.region_size, kSentinel);
  m.placement.assign(disasm.region_size, kSentinel);
  std::uint64_t cursor = 0;
  std::size_t i = 0;
  for (const auto& insn : disasm.instructions) {
    if (cursor >= kSentinel)
      fail(ErrorCode::Overflow, "new offset " + std::to_string(cursor) + " collides with the sentinel");
    m.placement[insn.offset] = static_cast<std::uint32_t>(cursor);
    cursor += new_sizes[i++];
  }
  m.laid_out_size = cursor;
  if (disasm.mode == DisassemblyMode::Superset) {
    m.entries = m.placement;
  } else {
    for (auto off : disasm.indirect_target_candidates)
      if (m.placement[off] != kSentinel) m.entries[off] = m.placement[off];
  }
  return m;
}

inline AddressMapping build_mapping(const DisassemblyResult& disasm, const MappingLayout& layout,
                                    const std::map<std::size_t, std::uint32_t>& new_sizes) {
  std::vector<std::uint32_t> sizes;
  sizes.reserve(disasm.instructions.size());
  for (const auto& insn : disasm.instructions) {
    auto it = new_sizes.find(insn.offset);
    if (it == new_sizes.end())
      fail(ErrorCode::Usage, "no new size for offset " + std::to_string(insn.offset));
    sizes.push_back(it->second);
  }
  return build_mapping(disasm, layout, sizes);
}

struct LookupResult {
  enum class Status : std::uint8_t { Mapped, Illegal, OutOfRegion };
  Status status;
  std::uint32_t new_offset = 0;

  friend bool operator==(const LookupResult&, const LookupResult&) = default;
};

// `old_address` is in the same space as mapping.old_base.
inline LookupResult lookup(const AddressMapping& mapping, std::uint64_t old_address) {
  if (old_address < mapping.old_base || old_address - mapping.old_base >= mapping.old_size)
    return {LookupResult::Status::OutOfRegion};
  const auto e = mapping.entries[old_address - mapping.old_base];
  if (e == kSentinel) return {LookupResult::Status::Illegal};
  return {LookupResult::Status::Mapped, e};
}

inline std::vector<std::uint8_t> serialize_mapping(const AddressMapping& mapping) {
  std::vector<std::uint8_t> out(mapping.entries.size() * 4);
  for (std::size_t i = 0; i < mapping.entries.size(); ++i) {
    const auto e = mapping.entries[i];
    out[4 * i] = static_cast<std::uint8_t>(e);
    out[4 * i + 1] = static_cast<std::uint8_t>(e >> 8);
    out[4 * i + 2] = static_cast<std::uint8_t>(e >> 16);
    out[4 * i + 3] = static_cast<std::uint8_t>(e >> 24);
  }
  return out;
}

inline AddressMapping deserialize_mapping(std::span<const std::uint8_t> bytes, std::uint64_t old_base,
                                          std::uint64_t new_base) {
  if (bytes.size() % 4 != 0) fail(ErrorCode::ParseFailure, "mapping table size is not a multiple of 4");
  AddressMapping m;
  m.old_base = old_base;
  m.new_base = new_base;
  m.old_size = bytes.size() / 4;
  m.entries.resize(m.old_size);
  for (std::size_t i = 0; i < m.old_size; ++i)
    m.entries[i] = static_cast<std::uint32_t>(bytes[4 * i]) | static_cast<std::uint32_t>(bytes[4 * i + 1]) << 8 |
                   static_cast<std::uint32_t>(bytes[4 * i + 2]) << 16 |
                   static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24;
  return m;
}

namespace detail {

inline void put_u64(std::vector<std::uint8_t>& out, std::size_t at, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

inline std::uint64_t get_u64(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[at + i]) << (8 * i);
  return v;
}

}  // namespace detail

struct RegionEntry {
  std::uint64_t local_lookup_address = 0;  // 0: external, uninstrumented region
  std::uint64_t region_base = 0;
  std::uint64_t region_size = 0;

  bool external() const { return local_lookup_address == 0; }
  friend bool operator==(const RegionEntry&, const RegionEntry&) = default;
};

struct RegionTable {
  std::uint64_t table_address = kDefaultTableAddress;
  std::uint64_t global_lookup_address = 0;
  std::vector<RegionEntry> entries;

  std::size_t byte_size() const { return kRegionTableHeaderSize + kRegionEntrySize * entries.size(); }

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out(byte_size(), 0);
    detail::put_u64(out, 0x00, entries.size());
    detail::put_u64(out, 0x08, global_lookup_address);
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const std::size_t at = kRegionTableHeaderSize + kRegionEntrySize * i;
      detail::put_u64(out, at, entries[i].local_lookup_address);
      detail::put_u64(out, at + 8, entries[i].region_base);
      detail::put_u64(out, at + 16, entries[i].region_size);
    }
    return out;
  }

  static RegionTable parse(std::span<const std::uint8_t> bytes, std::uint64_t table_address) {
    if (bytes.size() < kRegionTableHeaderSize) fail(ErrorCode::ParseFailure, "region table header truncated");
    RegionTable t;
    t.table_address = table_address;
    const std::uint64_t count = detail::get_u64(bytes, 0);
    t.global_lookup_address = detail::get_u64(bytes, 8);
    if (count > (bytes.size() - kRegionTableHeaderSize) / kRegionEntrySize)
      fail(ErrorCode::ParseFailure, "region table entries truncated");
    for (std::uint64_t i = 0; i < count; ++i) {
      const std::size_t at = kRegionTableHeaderSize + kRegionEntrySize * i;
      t.entries.push_back({detail::get_u64(bytes, at), detail::get_u64(bytes, at + 8),
                           detail::get_u64(bytes, at + 16)});
    }
    return t;
  }

  friend bool operator==(const RegionTable&, const RegionTable&) = default;
};

// Host-side mirror of the global stub's linear scan.
inline const RegionEntry* find_region(const RegionTable& table, std::uint64_t address) {
  for (const auto& e : table.entries)
    if (address - e.region_base < e.region_size) return &e;
  return nullptr;
}

enum class FixupMeaning : std::uint8_t {
  NewBaseDisplacement,  // rel32 of the lea that yields new_base at run time
  BaseAdjust,           // imm32 K = new_base - old_base (link-time)
  RegionSize,           // imm32 old region size
  MappingOffset,        // disp32 mapping table address - new_base
  GlobalLookupSlot,     // disp32 absolute address table_address + 8
  TableAddress,         // imm32 absolute table_address
  LookupCall,           // rel32 of a call into a lookup stub
};

constexpr std::string_view to_string(FixupMeaning m) {
  switch (m) {
    case FixupMeaning::NewBaseDisplacement: return "new_base_displacement";
    case FixupMeaning::BaseAdjust: return "base_adjust";
    case FixupMeaning::RegionSize: return "region_size";
    case FixupMeaning::MappingOffset: return "mapping_offset";
    case FixupMeaning::GlobalLookupSlot: return "global_lookup_slot";
    case FixupMeaning::TableAddress: return "table_address";
    case FixupMeaning::LookupCall: return "lookup_call";
  }
  return "?";
}

struct SymbolFixup {
  std::size_t offset_in_stub;  // first byte of the 4-byte field
  FixupMeaning meaning;
  std::int64_t value;  // value the field holds (rel32 fields: the resolved target)

  friend bool operator==(const SymbolFixup&, const SymbolFixup&) = default;
};

struct LookupStub {
  std::uint64_t vaddr = 0;  // link-time address of the first byte
  std::vector<std::uint8_t> machine_code;
  std::vector<SymbolFixup> symbol_fixups;
};

struct LocalStubConstants {
  std::uint64_t stub_vaddr = 0;
  std::uint64_t mapping_table_vaddr = 0;
  std::uint64_t table_address = kDefaultTableAddress;
};

namespace detail {

inline std::int32_t checked_i32(std::int64_t v, std::string_view what) {
  if (!x86::fits_i32(v)) fail(ErrorCode::Overflow, std::string(what) + " does not fit in 32 bits");
  return static_cast<std::int32_t>(v);
}

inline void check_table_address(std::uint64_t table_address) {
  if (table_address + 8 > 0x7fffffffu)
    fail(ErrorCode::Usage, "region table address must be below 2 GiB to be encodable as disp32");
}

}  // namespace detail

// Per-region constant-time translation. Input: rax = address to translate,
// [rsp] = return address. Output: rax = translated address. Preserves every
// other register. Out-of-region addresses tail into the global lookup read
// from table_address + 8; sentinel entries halt.
inline LookupStub emit_local_lookup_stub(const AddressMapping& mapping, const LocalStubConstants& c) {
  using namespace x86;
  detail::check_table_address(c.table_address);
  const std::int64_t k = static_cast<std::int64_t>(mapping.new_base) - static_cast<std::int64_t>(mapping.old_base);
  const std::int32_t k32 = detail::checked_i32(k, "new_base - old_base");
  const std::int32_t size32 = detail::checked_i32(static_cast<std::int64_t>(mapping.old_size), "region size");
  const std::int32_t map_off = detail::checked_i32(
      static_cast<std::int64_t>(c.mapping_table_vaddr) - static_cast<std::int64_t>(mapping.new_base),
      "mapping table offset");

  LookupStub stub;
  stub.vaddr = c.stub_vaddr;
  Assembler a(c.stub_vaddr);
  auto outside = a.new_label();
  auto failure = a.new_label();
  auto field = [&](FixupMeaning m, std::int64_t v) { stub.symbol_fixups.push_back({a.size() - 4, m, v}); };

  a.push(rbx);
  a.mov(rbx, rax);
  a.lea(rax, Mem::rip_to(mapping.new_base));
  field(FixupMeaning::NewBaseDisplacement, static_cast<std::int64_t>(mapping.new_base));
  a.add(rbx, k32);
  field(FixupMeaning::BaseAdjust, k32);
  a.sub(rbx, rax);
  a.jcc(Cond::B, outside);
  a.cmp(rbx, size32);
  field(FixupMeaning::RegionSize, size32);
  a.jcc(Cond::AE, outside);
  a.mov32(rbx, Mem::indexed(rax, rbx, 4, map_off));
  field(FixupMeaning::MappingOffset, map_off);
  a.cmp32(rbx, static_cast<std::int8_t>(-1));
  a.jcc(Cond::E, failure);
  a.add(rax, rbx);
  a.pop(rbx);
  a.ret();
  a.bind(outside);
  a.add(rbx, rax);
  a.sub(rbx, k32);
  field(FixupMeaning::BaseAdjust, k32);
  a.mov(rax, rbx);
  a.mov(rbx, Mem::absolute(c.table_address + 8));
  field(FixupMeaning::GlobalLookupSlot, static_cast<std::int64_t>(c.table_address + 8));
  a.xchg(rbx, Mem::at(rsp));
  a.add(rsp, 8);
  a.jmp(Mem::at(rsp, -8));
  a.bind(failure);
  a.hlt();
  stub.machine_code = a.finish();
  return stub;
}

// Linear scan over the region registry. Same register contract as the local
// stub; rbx carries the remap-return flag. On a region with a null local
// lookup (external code) the address is returned untranslated, and when the
// flag is set the return address pushed by the call trampoline (at [rsp+8])
// is translated recursively.
//
// The success path swaps the local lookup address into the slot r10 was
// saved in, restores the other registers in place and tail-jumps through
// that slot, so it writes nothing below its own frame. That keeps the scratch slots of the call trampoline intact across
// the recursive translation.
inline LookupStub emit_global_lookup_stub(const RegionTable& regions, std::uint64_t stub_vaddr) {
  using namespace x86;
  if (regions.entries.empty()) fail(ErrorCode::Usage, "region table needs at least one region");
  detail::check_table_address(regions.table_address);
  LookupStub stub;
  stub.vaddr = stub_vaddr;
  Assembler a(stub_vaddr);
  auto entry = a.new_label();
  auto searchloop = a.new_label();
  auto success = a.new_label();
  auto external = a.new_label();
  auto skip = a.new_label();
  auto failure = a.new_label();

  a.bind(entry);
  a.push(rcx);
  a.push(rbx);
  a.push(rdx);
  a.push(r10);
  a.mov_imm(rcx, static_cast<std::int32_t>(regions.table_address));
  stub.symbol_fixups.push_back(
      {a.size() - 4, FixupMeaning::TableAddress, static_cast<std::int64_t>(regions.table_address)});
  a.mov(rbx, Mem::at(rcx));
  a.xor_(rdx, rdx);
  a.bind(searchloop);
  a.cmp(rbx, rdx);
  a.jcc(Cond::E, failure);
  a.add(rcx, static_cast<std::int32_t>(kRegionEntrySize));
  a.mov(r10, Mem::at(rcx, 8));
  a.neg(r10);
  a.add(r10, rax);
  a.cmp(r10, Mem::at(rcx, 16));
  a.jcc(Cond::B, success);
  a.inc(rdx);
  a.jmp(searchloop);

  a.bind(success);
  a.mov(r10, Mem::at(rcx));
  a.test(r10, r10);
  a.jcc(Cond::E, external);
  a.xchg(r10, Mem::at(rsp));
  a.mov(rdx, Mem::at(rsp, 8));
  a.mov(rbx, Mem::at(rsp, 16));
  a.mov(rcx, Mem::at(rsp, 24));
  a.adjust_rsp(32);
  a.jmp(Mem::at(rsp, -32));

  a.bind(external);
  a.pop(r10);
  a.pop(rdx);
  a.pop(rbx);
  a.pop(rcx);
  a.test(rbx, rbx);
  a.jcc(Cond::E, skip);
  a.mov(Mem::at(rsp, -64), rax);
  a.mov(rax, Mem::at(rsp, 8));
  a.call(entry);
  a.mov(Mem::at(rsp, 8), rax);
  a.mov(rax, Mem::at(rsp, -64));
  a.bind(skip);
  a.ret();
  a.bind(failure);
  a.hlt();
  stub.machine_code = a.finish();
  return stub;
}

// Bytes below the lookup's entry rsp (the rsp holding its return address)
// that a lookup may overwrite, as [lo, hi) offsets relative to that rsp.
// Derived from the two stubs above: the global stub pushes four registers
// (the local stub pushes one, inside the same window); with the flag set the
// external path also spills rax to [rsp-64] and recurses, whose return
// address and pushes reach 40 bytes down.
struct ClobberRange {
  std::int64_t lo;
  std::int64_t hi;
};
inline std::vector<ClobberRange> lookup_clobbers(bool remap_return_flag) {
  if (!remap_return_flag) return {{-32, 0}};
  return {{-40, 0}, {-64, -56}};
}

}  // namespace tva
