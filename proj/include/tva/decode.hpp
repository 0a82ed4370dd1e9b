#pragma once

// Length decoding and control-flow classification of single x86-64
// instructions at arbitrary byte offsets.
//
// Conformance notes (the Invalid/Other boundary):
//  * Lengths follow Intel 64-bit mode semantics: 0x66 does not shrink near
//    relative branches, REX is discarded when a legacy prefix follows it, and
//    0F 20..23 ignore the ModRM mod field.
//  * Invalid is reported for opcodes that #UD in 64-bit mode (06, 07, 27, 60,
//    82, 9A, D4..D6, EA, ...), for undefined group encodings we check (C6/C7,
//    FE/FF, 0F 00, 0F BA, 0F C7), for misplaced LOCK, for VEX/EVEX/XOP after
//    66/F2/F3/F0/REX, for unknown 0F 38 / 0F 3A opcodes, and for anything that
//    exceeds 15 bytes or runs past the end of the buffer.
//  * VEX, EVEX and XOP opcodes are accepted by map membership only; the
//    L/W/pp combinations are not validated. x87 reg forms and 3DNow! suffixes
//    are accepted unconditionally. Reference disassemblers reject some of
//    these, which shows up as Other-vs-Invalid disagreements only.
//  * Halt covers instructions that never fall through to the next
//    instruction within this model: hlt, ud0/ud1/ud2, iret, sysret, sysexit
//    and rsm. Far returns and far indirect call/jmp keep their Return /
//    IndirectCall / IndirectJump kind with IndirectTarget::far (or
//    DecodedInstruction::far_return) set.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <variant>

namespace tva {

enum class InstructionKind : std::uint8_t {
  DirectCall,
  DirectJump,
  ConditionalJump,
  IndirectCall,
  IndirectJump,
  Return,
  Endbr64,
  Halt,
  Other,
  Invalid,
};

constexpr std::string_view to_string(InstructionKind kind) {
  switch (kind) {
    case InstructionKind::DirectCall: return "DirectCall";
    case InstructionKind::DirectJump: return "DirectJump";
    case InstructionKind::ConditionalJump: return "ConditionalJump";
    case InstructionKind::IndirectCall: return "IndirectCall";
    case InstructionKind::IndirectJump: return "IndirectJump";
    case InstructionKind::Return: return "Return";
    case InstructionKind::Endbr64: return "Endbr64";
    case InstructionKind::Halt: return "Halt";
    case InstructionKind::Other: return "Other";
    case InstructionKind::Invalid: return "Invalid";
  }
  return "?";
}

// Control never reaches offset+length after one of these.
constexpr bool is_terminator(InstructionKind kind) {
  return kind == InstructionKind::DirectJump || kind == InstructionKind::IndirectJump ||
         kind == InstructionKind::Return || kind == InstructionKind::Halt ||
         kind == InstructionKind::Invalid;
}

constexpr bool is_call(InstructionKind kind) {
  return kind == InstructionKind::DirectCall || kind == InstructionKind::IndirectCall;
}

constexpr bool has_target(InstructionKind kind) {
  return kind == InstructionKind::DirectCall || kind == InstructionKind::DirectJump ||
         kind == InstructionKind::ConditionalJump || kind == InstructionKind::IndirectCall ||
         kind == InstructionKind::IndirectJump;
}

enum class OperandClass : std::uint8_t { Register, Memory };

struct DirectTarget {
  // Region offset; may fall outside the region (negative or past the end).
  std::int64_t absolute_target;
  friend bool operator==(const DirectTarget&, const DirectTarget&) = default;
};

struct IndirectTarget {
  OperandClass operand_class;
  bool notrack = false;
  bool far = false;  // m16:64 / m16:32 far transfer (FF /3, FF /5)
  friend bool operator==(const IndirectTarget&, const IndirectTarget&) = default;
};

using TargetSpec = std::variant<DirectTarget, IndirectTarget>;

struct RipOperand {
  std::uint8_t displacement_offset_in_instruction;
  std::int32_t displacement_value;
  friend bool operator==(const RipOperand&, const RipOperand&) = default;
};

enum class OpcodeMap : std::uint8_t { Primary, Map0F, Map0F38, Map0F3A, Amd3DNow, Xop8, Xop9, XopA };
enum class VectorPrefix : std::uint8_t { None, Vex, Evex, Xop };

// Where each field of the encoding sits, relative to the instruction start.
// The rewriter needs this to re-encode branch immediates and ModRM operands.
struct EncodingLayout {
  std::uint8_t opcode_offset = 0;  // first byte after prefixes (escape bytes included)
  std::uint8_t rex = 0;            // effective REX byte, 0 when absent
  std::uint8_t segment = 0;        // last 64/65 override, 0 otherwise
  bool operand_size = false;       // 0x66
  bool address_size = false;       // 0x67
  bool lock = false;
  std::uint8_t last_rep = 0;  // 0xF2 / 0xF3 / 0
  VectorPrefix vector = VectorPrefix::None;
  OpcodeMap map = OpcodeMap::Primary;
  std::uint8_t opcode = 0;
  bool has_modrm = false;
  std::uint8_t modrm_offset = 0;
  std::uint8_t modrm = 0;
  bool has_sib = false;
  std::uint8_t sib = 0;
  std::uint8_t disp_offset = 0;
  std::uint8_t disp_size = 0;
  std::uint8_t imm_offset = 0;
  std::uint8_t imm_size = 0;

  std::uint8_t mod() const { return modrm >> 6; }
  std::uint8_t reg() const { return (modrm >> 3) & 7; }
  std::uint8_t rm() const { return modrm & 7; }

  friend bool operator==(const EncodingLayout&, const EncodingLayout&) = default;
};

struct DecodedInstruction {
  std::size_t offset = 0;
  std::uint8_t length = 1;
  InstructionKind kind = InstructionKind::Invalid;
  std::optional<TargetSpec> target;
  std::optional<RipOperand> rip_operand;
  bool far_return = false;         // CA / CB
  std::uint16_t return_pop = 0;    // C2 / CA imm16
  EncodingLayout layout;

  std::size_t end() const { return offset + length; }

  const DirectTarget* direct() const {
    return target ? std::get_if<DirectTarget>(&*target) : nullptr;
  }
  const IndirectTarget* indirect() const {
    return target ? std::get_if<IndirectTarget>(&*target) : nullptr;
  }

  friend bool operator==(const DecodedInstruction&, const DecodedInstruction&) = default;
};

inline constexpr std::array<std::uint8_t, 4> kEndbr64Bytes{0xF3, 0x0F, 0x1E, 0xFA};

inline bool is_endbr64_at(std::span<const std::uint8_t> code, std::size_t offset) {
  if (offset > code.size() || code.size() - offset < 4) return false;
  return code[offset] == 0xF3 && code[offset + 1] == 0x0F && code[offset + 2] == 0x1E &&
         code[offset + 3] == 0xFA;
}

namespace detail {

// Per-opcode attribute letters:
//   m ModRM            b ModRM + imm8      z ModRM + imm16/32    - no operands
//   1 imm8             2 imm16             Z imm16/32            V imm16/32/64
//   O moffs            E enter (imm16+8)   r rel8                R rel32
//   c ModRM, mod ignored (mov cr/dr)       p prefix / escape     g group, decoded in code
//   x invalid in 64-bit mode
inline constexpr std::string_view kPrimaryMap =
    "mmmm1Zxxmmmm1Zxp"   // 00
    "mmmm1Zxxmmmm1Zxx"   // 10
    "mmmm1Zpxmmmm1Zpx"   // 20
    "mmmm1Zpxmmmm1Zpx"   // 30
    "pppppppppppppppp"   // 40
    "----------------"   // 50
    "xxpmppppZz1b----"   // 60
    "rrrrrrrrrrrrrrrr"   // 70
    "bzxbmmmmmmmmmmmg"   // 80
    "----------x-----"   // 90
    "OOOO----1Z------"   // A0
    "11111111VVVVVVVV"   // B0
    "bb2-ppggE-2--1x-"   // C0
    "mmmmxxx-mmmmmmmm"   // D0
    "rrrr1111RRxr----"   // E0
    "p-pp--gg------gg";  // F0

inline constexpr std::string_view kMap0F =
    "gmmmx-----x-xm-p"   // 00
    "mmmmmmmmmmmmmmmm"   // 10
    "ccccxxxxmmmmmmmm"   // 20
    "------x-pxpxxxxx"   // 30
    "mmmmmmmmmmmmmmmm"   // 40
    "mmmmmmmmmmmmmmmm"   // 50
    "mmmmmmmmmmmmmmmm"   // 60
    "bgggmmm-ggxxmmmm"   // 70
    "RRRRRRRRRRRRRRRR"   // 80
    "mmmmmmmmmmmmmmmm"   // 90
    "---mbmxx---mbmmm"   // A0
    "mmmmmmmmgmgmmmmm"   // B0
    "mmbmbbbg--------"   // C0
    "mmmmmmmmmmmmmmmm"   // D0
    "mmmmmmmmmmmmmmmm"   // E0
    "mmmmmmmmmmmmmmmm";  // F0

using OpcodeSet = std::array<bool, 256>;

constexpr OpcodeSet make_set(std::initializer_list<std::pair<int, int>> ranges) {
  OpcodeSet set{};
  for (auto [lo, hi] : ranges)
    for (int op = lo; op <= hi; ++op) set[static_cast<std::size_t>(op)] = true;
  return set;
}

inline constexpr OpcodeSet kLegacy0F38 = make_set({{0x00, 0x0B}, {0x10, 0x10}, {0x14, 0x15},
                                                   {0x17, 0x17}, {0x1C, 0x1E}, {0x20, 0x25},
                                                   {0x28, 0x2B}, {0x30, 0x35}, {0x37, 0x41},
                                                   {0x80, 0x82}, {0xC8, 0xCD}, {0xCF, 0xCF},
                                                   {0xDB, 0xDF}, {0xF0, 0xF1}, {0xF5, 0xF6},
                                                   {0xF8, 0xF9}});

inline constexpr OpcodeSet kLegacy0F3A = make_set({{0x08, 0x0F}, {0x14, 0x17}, {0x20, 0x22},
                                                   {0x40, 0x42}, {0x44, 0x44}, {0x60, 0x63},
                                                   {0xCC, 0xCC}, {0xCE, 0xCF}, {0xDF, 0xDF}});

inline constexpr OpcodeSet kVex0F = make_set({{0x10, 0x17}, {0x28, 0x2F}, {0x41, 0x42},
                                              {0x44, 0x47}, {0x4A, 0x4B}, {0x50, 0x7F},
                                              {0x90, 0x93}, {0x98, 0x99}, {0xAE, 0xAE},
                                              {0xC2, 0xC2}, {0xC4, 0xC6}, {0xD0, 0xFE}});

inline constexpr OpcodeSet kVex0F38 = make_set(
    {{0x00, 0x0F}, {0x13, 0x13}, {0x16, 0x1A}, {0x1C, 0x1E}, {0x20, 0x25}, {0x28, 0x2F},
     {0x30, 0x41}, {0x45, 0x47}, {0x50, 0x53}, {0x58, 0x5A}, {0x78, 0x79}, {0x8C, 0x8C},
     {0x8E, 0x8E}, {0x90, 0x9F}, {0xA6, 0xAF}, {0xB0, 0xB1}, {0xB4, 0xB5}, {0xB6, 0xBF},
     {0xCF, 0xCF}, {0xDB, 0xDF}, {0xF2, 0xF3}, {0xF5, 0xF7}});

inline constexpr OpcodeSet kVex0F3A = make_set(
    {{0x00, 0x02}, {0x04, 0x06}, {0x08, 0x0F}, {0x14, 0x19}, {0x1D, 0x1D}, {0x20, 0x22},
     {0x30, 0x33}, {0x38, 0x39}, {0x40, 0x42}, {0x44, 0x44}, {0x46, 0x46}, {0x48, 0x4C},
     {0x5C, 0x5F}, {0x60, 0x63}, {0x68, 0x6F}, {0x78, 0x7F}, {0xCE, 0xCF}, {0xDF, 0xDF},
     {0xF0, 0xF0}});

inline constexpr OpcodeSet k3DNowSuffix = make_set(
    {{0x0C, 0x0D}, {0x1C, 0x1D}, {0x8A, 0x8A}, {0x8E, 0x8E}, {0x90, 0x90}, {0x94, 0x94},
     {0x96, 0x97}, {0x9A, 0x9A}, {0x9E, 0x9E}, {0xA0, 0xA0}, {0xA4, 0xA4}, {0xA6, 0xA7},
     {0xAA, 0xAA}, {0xAE, 0xAE}, {0xB0, 0xB0}, {0xB4, 0xB4}, {0xB6, 0xB7}, {0xBB, 0xBB},
     {0xBF, 0xBF}, {0x86, 0x87}});

// Opcodes of map 0F (VEX/EVEX) that carry an imm8.
constexpr bool map0f_vector_has_imm8(std::uint8_t op) {
  return (op >= 0x70 && op <= 0x73) || op == 0xC2 || (op >= 0xC4 && op <= 0xC6);
}

// LOCK is legal only on the memory forms of these.
constexpr bool lockable(OpcodeMap map, std::uint8_t op, std::uint8_t reg) {
  if (map == OpcodeMap::Primary) {
    if (op <= 0x31 && (op & 0x07) <= 1 && (op & 0x0F) != 0x06 && (op & 0x0F) != 0x07) return true;
    if (op >= 0x80 && op <= 0x83) return reg != 7;
    if (op == 0x86 || op == 0x87) return true;
    if (op == 0xF6 || op == 0xF7) return reg == 2 || reg == 3;
    if (op == 0xFE || op == 0xFF) return reg == 0 || reg == 1;
    return false;
  }
  if (map == OpcodeMap::Map0F) {
    switch (op) {
      case 0xB0: case 0xB1: case 0xC0: case 0xC1: case 0xAB: case 0xB3: case 0xBB: return true;
      case 0xBA: return reg >= 5;
      case 0xC7: return reg == 1;
      default: return false;
    }
  }
  return false;
}

struct Reader {
  const std::uint8_t* data;
  std::size_t avail;
  std::size_t pos = 0;

  bool has(std::size_t n) const { return pos + n <= avail; }
  std::uint8_t peek(std::size_t ahead = 0) const { return data[pos + ahead]; }
  std::uint8_t take() { return data[pos++]; }
};

inline std::int64_t read_signed(const std::uint8_t* p, std::size_t size) {
  switch (size) {
    case 1: return static_cast<std::int8_t>(p[0]);
    case 2: return static_cast<std::int16_t>(p[0] | (p[1] << 8));
    case 4:
      return static_cast<std::int32_t>(static_cast<std::uint32_t>(p[0]) |
                                       (static_cast<std::uint32_t>(p[1]) << 8) |
                                       (static_cast<std::uint32_t>(p[2]) << 16) |
                                       (static_cast<std::uint32_t>(p[3]) << 24));
    default: return 0;
  }
}

enum class ImmKind : std::uint8_t { None, Byte, Word, Z, V, Moffs, Enter, Rel8, Rel32, Dword };

}  // namespace detail

inline DecodedInstruction decode_at(std::span<const std::uint8_t> code, std::size_t offset) {
  using detail::ImmKind;
  DecodedInstruction out;
  out.offset = offset;
  if (offset >= code.size()) return out;

  const std::size_t remaining = code.size() - offset;
  detail::Reader in{code.data() + offset, remaining < 15 ? remaining : 15};
  EncodingLayout& lay = out.layout;
  bool has_f2_f3 = false;
  bool notrack = false;

  // Legacy prefixes and REX.
  for (;;) {
    if (!in.has(1)) return out;
    const std::uint8_t b = in.peek();
    if (b >= 0x40 && b <= 0x4F) {
      lay.rex = b;
      in.take();
      continue;
    }
    bool prefix = true;
    switch (b) {
      case 0x26: case 0x2E: case 0x36: break;
      case 0x3E: notrack = true; break;
      case 0x64: case 0x65: lay.segment = b; break;
      case 0x66: lay.operand_size = true; break;
      case 0x67: lay.address_size = true; break;
      case 0xF0: lay.lock = true; break;
      case 0xF2: case 0xF3: lay.last_rep = b; has_f2_f3 = true; break;
      default: prefix = false; break;
    }
    if (!prefix) break;
    lay.rex = 0;
    in.take();
  }

  lay.opcode_offset = static_cast<std::uint8_t>(in.pos);
  const bool rex_w = (lay.rex & 0x08) != 0;

  bool valid = true;
  bool force_reg_form = false;
  bool needs_modrm = false;
  ImmKind imm = ImmKind::None;
  ImmKind imm2 = ImmKind::None;  // second immediate (extrq/insertq, 3DNow! suffix)
  std::uint8_t implied_rep = lay.last_rep;
  bool implied_opsize = lay.operand_size;

  auto decode_vector = [&](VectorPrefix kind) -> bool {
    if (lay.rex || lay.operand_size || has_f2_f3 || lay.lock) return false;
    lay.vector = kind;
    std::uint8_t map_select = 0;
    std::uint8_t pp = 0;
    if (kind == VectorPrefix::Vex) {
      const std::uint8_t escape = in.take();
      if (escape == 0xC5) {
        if (!in.has(1)) return false;
        pp = in.take() & 3;
        map_select = 1;
      } else {
        if (!in.has(2)) return false;
        map_select = in.take() & 0x1F;
        pp = in.take() & 3;
      }
      if (map_select < 1 || map_select > 3) return false;
    } else if (kind == VectorPrefix::Evex) {
      in.take();
      if (!in.has(3)) return false;
      const std::uint8_t p0 = in.take();
      const std::uint8_t p1 = in.take();
      in.take();
      if ((p1 & 0x04) == 0 || (p0 & 0x0C) != 0) return false;
      map_select = p0 & 0x03;
      pp = p1 & 3;
      if (map_select == 0) return false;
    } else {
      in.take();
      if (!in.has(2)) return false;
      map_select = in.take() & 0x1F;
      pp = in.take() & 3;
      if (map_select < 8 || map_select > 10) return false;
      if (pp != 0) return false;
    }
    if (!in.has(1)) return false;
    lay.opcode = in.take();
    implied_opsize = pp == 1;
    implied_rep = pp == 2 ? 0xF3 : pp == 3 ? 0xF2 : 0;
    needs_modrm = true;
    if (kind == VectorPrefix::Xop) {
      lay.map = map_select == 8 ? OpcodeMap::Xop8 : map_select == 9 ? OpcodeMap::Xop9 : OpcodeMap::XopA;
      imm = map_select == 8 ? ImmKind::Byte : map_select == 10 ? ImmKind::Dword : ImmKind::None;
      return true;
    }
    switch (map_select) {
      case 1:
        lay.map = OpcodeMap::Map0F;
        if (kind == VectorPrefix::Vex && !detail::kVex0F[lay.opcode]) return false;
        if (kind == VectorPrefix::Vex && lay.opcode == 0x77) needs_modrm = false;
        if (detail::map0f_vector_has_imm8(lay.opcode)) imm = ImmKind::Byte;
        break;
      case 2:
        lay.map = OpcodeMap::Map0F38;
        if (kind == VectorPrefix::Vex && !detail::kVex0F38[lay.opcode]) return false;
        break;
      case 3:
        lay.map = OpcodeMap::Map0F3A;
        if (kind == VectorPrefix::Vex && !detail::kVex0F3A[lay.opcode]) return false;
        imm = ImmKind::Byte;
        break;
      default: return false;
    }
    return true;
  };

  auto apply_letter = [&](char letter) {
    switch (letter) {
      case 'm': needs_modrm = true; break;
      case 'b': needs_modrm = true; imm = ImmKind::Byte; break;
      case 'z': needs_modrm = true; imm = ImmKind::Z; break;
      case 'c': needs_modrm = true; force_reg_form = true; break;
      case '-': break;
      case '1': imm = ImmKind::Byte; break;
      case '2': imm = ImmKind::Word; break;
      case 'Z': imm = ImmKind::Z; break;
      case 'V': imm = ImmKind::V; break;
      case 'O': imm = ImmKind::Moffs; break;
      case 'E': imm = ImmKind::Enter; break;
      case 'r': imm = ImmKind::Rel8; break;
      case 'R': imm = ImmKind::Rel32; break;
      case 'g': needs_modrm = true; break;
      default: valid = false; break;
    }
  };

  const std::uint8_t first = in.peek();
  char letter = detail::kPrimaryMap[first];
  if (first == 0xC4 || first == 0xC5) {
    if (!decode_vector(VectorPrefix::Vex)) return out;
  } else if (first == 0x62) {
    if (!decode_vector(VectorPrefix::Evex)) return out;
  } else if (first == 0x8F && in.has(2) && (in.peek(1) & 0x1F) >= 8) {
    if (!decode_vector(VectorPrefix::Xop)) return out;
  } else if (first == 0x0F) {
    in.take();
    if (!in.has(1)) return out;
    const std::uint8_t second = in.take();
    if (second == 0x38 || second == 0x3A) {
      if (!in.has(1)) return out;
      lay.opcode = in.take();
      lay.map = second == 0x38 ? OpcodeMap::Map0F38 : OpcodeMap::Map0F3A;
      const auto& set = second == 0x38 ? detail::kLegacy0F38 : detail::kLegacy0F3A;
      if (!set[lay.opcode]) return out;
      needs_modrm = true;
      if (second == 0x3A) imm = ImmKind::Byte;
    } else if (second == 0x0F) {
      lay.map = OpcodeMap::Amd3DNow;
      lay.opcode = 0x0F;
      needs_modrm = true;
      imm = ImmKind::Byte;  // opcode suffix byte
    } else {
      lay.map = OpcodeMap::Map0F;
      lay.opcode = second;
      apply_letter(detail::kMap0F[second]);
      if (!valid) return out;
    }
  } else {
    in.take();
    lay.map = OpcodeMap::Primary;
    lay.opcode = first;
    // A prefix byte here means the 15-byte window ended inside the prefix run.
    if (letter == 'p') return out;
    apply_letter(letter);
    if (!valid) return out;
  }

  // ModRM / SIB / displacement.
  bool rip_relative = false;
  if (needs_modrm) {
    if (!in.has(1)) return out;
    lay.has_modrm = true;
    lay.modrm_offset = static_cast<std::uint8_t>(in.pos);
    lay.modrm = in.take();
    const std::uint8_t mod = lay.mod();
    const std::uint8_t rm = lay.rm();
    if (!force_reg_form && mod != 3) {
      if (rm == 4) {
        if (!in.has(1)) return out;
        lay.has_sib = true;
        lay.sib = in.take();
        if (mod == 0 && (lay.sib & 7) == 5) lay.disp_size = 4;
      }
      if (mod == 0 && rm == 5) {
        lay.disp_size = 4;
        rip_relative = true;
      }
      if (mod == 1) lay.disp_size = 1;
      if (mod == 2) lay.disp_size = 4;
    }
    lay.disp_offset = static_cast<std::uint8_t>(in.pos);
    if (!in.has(lay.disp_size)) return out;
    in.pos += lay.disp_size;
  }

  const std::uint8_t op = lay.opcode;
  const std::uint8_t reg = lay.reg();
  const bool reg_form = lay.has_modrm && lay.mod() == 3;
  bool xbegin = false;

  // Group-specific validity and immediates.
  if (lay.vector == VectorPrefix::None) {
    if (lay.map == OpcodeMap::Primary) {
      switch (op) {
        case 0x8D: if (reg_form) return out; break;
        case 0x8C: case 0x8E: if (reg > 5) return out; break;
        case 0x8F: if (reg != 0) return out; break;
        case 0xC6:
          if (reg == 0) imm = ImmKind::Byte;
          else if (reg == 7 && lay.modrm == 0xF8) imm = ImmKind::Byte;
          else return out;
          break;
        case 0xC7:
          if (reg == 0) imm = ImmKind::Z;
          else if (reg == 7 && lay.modrm == 0xF8) { imm = ImmKind::Rel32; xbegin = true; }
          else return out;
          break;
        case 0xF6: if (reg <= 1) imm = ImmKind::Byte; break;
        case 0xF7: if (reg <= 1) imm = ImmKind::Z; break;
        case 0xFE: if (reg > 1) return out; break;
        case 0xFF:
          if (reg == 7) return out;
          if ((reg == 3 || reg == 5) && reg_form) return out;
          break;
        default: break;
      }
    } else if (lay.map == OpcodeMap::Map0F) {
      switch (op) {
        case 0x00: if (reg > 5) return out; break;
        case 0x71: case 0x72:
          if (!reg_form || (reg != 2 && reg != 4 && reg != 6)) return out;
          imm = ImmKind::Byte;
          break;
        case 0x73:
          if (!reg_form || (reg != 2 && reg != 3 && reg != 6 && reg != 7)) return out;
          if ((reg == 3 || reg == 7) && !lay.operand_size) return out;
          imm = ImmKind::Byte;
          break;
        case 0x78:
          if (implied_rep == 0xF2) {
            if (!reg_form) return out;
            imm = ImmKind::Byte; imm2 = ImmKind::Byte;
          } else if (implied_opsize && implied_rep == 0) {
            if (!reg_form) return out;
            imm = ImmKind::Byte; imm2 = ImmKind::Byte;
          } else if (implied_rep == 0xF3) {
            return out;
          }
          break;
        case 0x79:
          if (implied_rep == 0xF2 || (implied_opsize && implied_rep == 0)) {
            if (!reg_form) return out;
          } else if (implied_rep == 0xF3) {
            return out;
          }
          break;
        case 0xB8: if (implied_rep != 0xF3) return out; break;
        case 0x7C: case 0x7D: case 0xD0:
          if (!implied_opsize && implied_rep != 0xF2) return out;
          break;
        case 0xF0: if (implied_rep != 0xF2 || reg_form) return out; break;
        case 0x6C: case 0x6D: if (!implied_opsize || implied_rep) return out; break;
        case 0xD6:
          if (implied_rep ? !reg_form : !implied_opsize) return out;
          break;
        case 0xE6: if (!implied_opsize && !implied_rep) return out; break;
        case 0x52: case 0x53: if (implied_rep == 0xF2 || (implied_opsize && !implied_rep)) return out; break;
        case 0x77: if (implied_opsize || implied_rep) return out; break;
        case 0xC3: if (implied_opsize || implied_rep || reg_form) return out; break;
        case 0x50: case 0xC5: case 0xD7: case 0xF7: if (!reg_form) return out; break;
        case 0x13: case 0x17: case 0x2B: case 0xE7: case 0xB2: case 0xB4: case 0xB5:
          if (reg_form) return out;
          break;
        case 0xBA: if (reg < 4) return out; imm = ImmKind::Byte; break;
        case 0xC7:
          if (reg == 0 || reg == 2) return out;
          if (reg == 1 || reg == 3 || reg == 4 || reg == 5) { if (reg_form) return out; }
          break;
        default: break;
      }
    }
  }

  if (lay.map == OpcodeMap::Amd3DNow) {
    if (!in.has(1) || !detail::k3DNowSuffix[in.peek()]) return out;
  }

  if (lay.lock && (reg_form || !lay.has_modrm || lay.vector != VectorPrefix::None ||
                   !detail::lockable(lay.map, op, reg)))
    return out;

  // Immediates.
  auto imm_bytes = [&](ImmKind kind) -> std::size_t {
    switch (kind) {
      case ImmKind::None: return 0;
      case ImmKind::Byte: case ImmKind::Rel8: return 1;
      case ImmKind::Word: return 2;
      case ImmKind::Z: return (lay.operand_size && !rex_w) ? 2 : 4;
      case ImmKind::V: return rex_w ? 8 : lay.operand_size ? 2 : 4;
      case ImmKind::Moffs: return lay.address_size ? 4 : 8;
      case ImmKind::Enter: return 3;
      case ImmKind::Rel32:
        return (xbegin && lay.operand_size) ? 2 : 4;
      case ImmKind::Dword: return 4;
    }
    return 0;
  };
  lay.imm_offset = static_cast<std::uint8_t>(in.pos);
  const std::size_t imm_size = imm_bytes(imm) + imm_bytes(imm2);
  if (!in.has(imm_size)) return out;
  lay.imm_size = static_cast<std::uint8_t>(imm_size);
  in.pos += imm_size;

  out.length = static_cast<std::uint8_t>(in.pos);
  if (rip_relative) {
    out.rip_operand = RipOperand{lay.disp_offset,
                                 static_cast<std::int32_t>(detail::read_signed(in.data + lay.disp_offset, 4))};
  }

  auto direct = [&](InstructionKind kind) {
    out.kind = kind;
    const std::int64_t rel = detail::read_signed(in.data + lay.imm_offset, lay.imm_size);
    out.target = DirectTarget{static_cast<std::int64_t>(offset) + out.length + rel};
  };
  auto indirect = [&](InstructionKind kind, bool far) {
    out.kind = kind;
    out.target = IndirectTarget{reg_form ? OperandClass::Register : OperandClass::Memory, notrack, far};
  };

  out.kind = InstructionKind::Other;
  if (lay.vector != VectorPrefix::None) return out;

  if (lay.map == OpcodeMap::Primary) {
    switch (op) {
      case 0xE8: direct(InstructionKind::DirectCall); break;
      case 0xE9: case 0xEB: direct(InstructionKind::DirectJump); break;
      case 0xE0: case 0xE1: case 0xE2: case 0xE3: direct(InstructionKind::ConditionalJump); break;
      case 0xC7: if (xbegin) direct(InstructionKind::ConditionalJump); break;
      case 0xC2: case 0xC3: case 0xCA: case 0xCB:
        out.kind = InstructionKind::Return;
        out.far_return = op == 0xCA || op == 0xCB;
        if (op == 0xC2 || op == 0xCA)
          out.return_pop = static_cast<std::uint16_t>(in.data[lay.imm_offset] | (in.data[lay.imm_offset + 1] << 8));
        break;
      case 0xCF: case 0xF4: out.kind = InstructionKind::Halt; break;
      case 0xFF:
        if (reg == 2) indirect(InstructionKind::IndirectCall, false);
        else if (reg == 3) indirect(InstructionKind::IndirectCall, true);
        else if (reg == 4) indirect(InstructionKind::IndirectJump, false);
        else if (reg == 5) indirect(InstructionKind::IndirectJump, true);
        break;
      default:
        if (op >= 0x70 && op <= 0x7F) direct(InstructionKind::ConditionalJump);
        break;
    }
  } else if (lay.map == OpcodeMap::Map0F) {
    if (op >= 0x80 && op <= 0x8F) direct(InstructionKind::ConditionalJump);
    else if (op == 0x0B || op == 0xB9 || op == 0xFF || op == 0x07 || op == 0x35 || op == 0xAA)
      out.kind = InstructionKind::Halt;
    else if (op == 0x1E && is_endbr64_at(code, offset))
      out.kind = InstructionKind::Endbr64;
  }
  return out;
}

}  // namespace tva
