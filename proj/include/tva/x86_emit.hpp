#pragma once

// Minimal x86-64 assembler for the handful of instruction forms the lookup
// stubs, trampolines and instrumentation passes use.
//
// Code is assembled for a known link-time address (`origin`), so RIP-relative
// operands and rel32 branches can target absolute link-time addresses as well
// as local labels. Every instruction that moves rsp or touches rsp-relative
// memory also records a StackEffect, which is what the stack-slot discipline
// check walks.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tva/error.hpp"

namespace tva::x86 {

enum Reg : std::uint8_t {
  rax, rcx, rdx, rbx, rsp, rbp, rsi, rdi, r8, r9, r10, r11, r12, r13, r14, r15,
};

struct Label {
  int id = -1;
};

// Abstract effect of one instruction on the stack, relative to the rsp value
// in force before the instruction executes.
struct StackEffect {
  enum class Kind : std::uint8_t {
    Write,        // 8-byte store at rsp+disp
    Read,         // 8-byte load from rsp+disp
    ReadWrite,    // xchg reg, [rsp+disp]
    Push,         // rsp -= 8, write [rsp]
    Pop,          // read [rsp], rsp += 8
    AdjustRsp,    // rsp += disp
    CallLookup,   // call into the address lookup (see lookup clobber rules)
    SetFlag,      // remap-return flag register := disp
  };
  Kind kind;
  std::int64_t disp = 0;
  std::size_t at = 0;  // byte offset of the instruction in the buffer
};

// Memory operand. Exactly one of: base register (+optional index), absolute
// disp32 (no base, no index), or RIP-relative to a link-time address/label.
struct Mem {
  std::optional<Reg> base;
  std::optional<Reg> index;
  std::uint8_t scale = 1;
  std::int64_t disp = 0;
  bool rip = false;
  std::uint64_t rip_target = 0;
  int rip_label = -1;

  static Mem at(Reg base, std::int64_t disp = 0) { return Mem{base, std::nullopt, 1, disp}; }
  static Mem indexed(Reg base, Reg index, std::uint8_t scale, std::int64_t disp = 0) {
    return Mem{base, index, scale, disp};
  }
  static Mem absolute(std::uint64_t address) {
    return Mem{std::nullopt, std::nullopt, 1, static_cast<std::int64_t>(address)};
  }
  static Mem rip_to(std::uint64_t target) {
    Mem m;
    m.rip = true;
    m.rip_target = target;
    return m;
  }
  static Mem rip_to(Label label) {
    Mem m;
    m.rip = true;
    m.rip_label = label.id;
    return m;
  }
};

enum class Cond : std::uint8_t { O, NO, B, AE, E, NE, BE, A, S, NS, P, NP, L, GE, LE, G };

inline bool fits_i32(std::int64_t v) { return v >= INT32_MIN && v <= INT32_MAX; }
inline bool fits_i8(std::int64_t v) { return v >= -128 && v <= 127; }

class Assembler {
 public:
  explicit Assembler(std::uint64_t origin = 0) : origin_(origin) {}

  std::uint64_t origin() const { return origin_; }
  std::size_t size() const { return bytes_.size(); }
  std::uint64_t here() const { return origin_ + bytes_.size(); }
  const std::vector<StackEffect>& effects() const { return effects_; }

  Label new_label() {
    label_pos_.push_back(-1);
    return Label{static_cast<int>(label_pos_.size() - 1)};
  }
  void bind(Label l) { label_pos_.at(static_cast<std::size_t>(l.id)) = static_cast<std::int64_t>(bytes_.size()); }
  bool bound(Label l) const { return label_pos_.at(static_cast<std::size_t>(l.id)) >= 0; }
  std::uint64_t address_of(Label l) const {
    return origin_ + static_cast<std::uint64_t>(label_pos_.at(static_cast<std::size_t>(l.id)));
  }

  void raw(std::initializer_list<std::uint8_t> b) { bytes_.insert(bytes_.end(), b); }
  void raw(const std::vector<std::uint8_t>& b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  // --- stack ---
  void push(Reg r) {
    effect(StackEffect::Kind::Push);
    rex_if(false, 0, 0, r);
    u8(static_cast<std::uint8_t>(0x50 + (r & 7)));
  }
  // push simm32 (sign-extended to 64 bits)
  void push_imm(std::int32_t imm) {
    effect(StackEffect::Kind::Push);
    u8(0x68);
    u32(static_cast<std::uint32_t>(imm));
  }
  void pop(Reg r) {
    effect(StackEffect::Kind::Pop);
    rex_if(false, 0, 0, r);
    u8(static_cast<std::uint8_t>(0x58 + (r & 7)));
  }
  // lea rsp, [rsp+delta]: moves rsp without touching flags.
  void adjust_rsp(std::int32_t delta) {
    effect(StackEffect::Kind::AdjustRsp, delta);
    op_modrm(true, {0x8D}, rsp, Mem::at(rsp, delta));
  }

  // --- moves ---
  void mov(Reg dst, Reg src) { op_reg_reg(true, 0x89, src, dst); }
  void mov(Reg dst, const Mem& src) {
    stack_access(src, StackEffect::Kind::Read);
    op_modrm(true, {0x8B}, dst, src);
  }
  void mov(const Mem& dst, Reg src) {
    stack_access(dst, StackEffect::Kind::Write);
    op_modrm(true, {0x89}, src, dst);
  }
  // mov r32, [mem] (zero-extends into the 64-bit register)
  void mov32(Reg dst, const Mem& src) { op_modrm(false, {0x8B}, dst, src); }
  // mov r32, imm32 (zero-extends)
  void mov32(Reg dst, std::uint32_t imm) {
    // The remap-return flag lives in rbx; record its value for the checker.
    if (dst == rbx) effect(StackEffect::Kind::SetFlag, imm);
    rex_if(false, 0, 0, dst);
    u8(static_cast<std::uint8_t>(0xB8 + (dst & 7)));
    u32(imm);
  }
  // mov r64, simm32
  void mov_imm(Reg dst, std::int32_t imm) {
    op_reg_ext(true, 0xC7, 0, dst);
    u32(static_cast<std::uint32_t>(imm));
  }
  // mov qword [mem], simm32
  void mov_imm(const Mem& dst, std::int32_t imm) {
    stack_access(dst, StackEffect::Kind::Write);
    op_modrm(true, {0xC7}, static_cast<Reg>(0), dst, 4);
    u32(static_cast<std::uint32_t>(imm));
  }
  void lea(Reg dst, const Mem& src) { op_modrm(true, {0x8D}, dst, src); }
  void xchg(Reg r, const Mem& m) {
    stack_access(m, StackEffect::Kind::ReadWrite);
    op_modrm(true, {0x87}, r, m);
  }

  // --- arithmetic ---
  void add(Reg dst, Reg src) { op_reg_reg(true, 0x01, src, dst); }
  void sub(Reg dst, Reg src) { op_reg_reg(true, 0x29, src, dst); }
  void xor_(Reg dst, Reg src) { op_reg_reg(true, 0x31, src, dst); }
  void test(Reg a, Reg b) { op_reg_reg(true, 0x85, b, a); }
  void cmp(Reg a, Reg b) { op_reg_reg(true, 0x39, b, a); }
  void add(Reg dst, std::int32_t imm) { alu_imm(0, dst, imm); }
  void sub(Reg dst, std::int32_t imm) { alu_imm(5, dst, imm); }
  void cmp(Reg dst, std::int32_t imm) { alu_imm(7, dst, imm); }
  void cmp32(Reg dst, std::int8_t imm) {
    op_reg_ext(false, 0x83, 7, dst);
    u8(static_cast<std::uint8_t>(imm));
  }
  void cmp(Reg a, const Mem& m) {
    stack_access(m, StackEffect::Kind::Read);
    op_modrm(true, {0x3B}, a, m);
  }
  // cmp dword [mem], imm32
  void cmp32(const Mem& m, std::uint32_t imm) {
    op_modrm(false, {0x81}, static_cast<Reg>(7), m, 4);
    u32(imm);
  }
  void neg(Reg r) { op_reg_ext(true, 0xF7, 3, r); }
  void inc(Reg r) { op_reg_ext(true, 0xFF, 0, r); }

  // --- control flow ---
  void jmp(Label l) { rel32({0xE9}, l); }
  void jmp_abs(std::uint64_t target) { rel32_abs({0xE9}, target); }
  void jcc(Cond c, Label l) { rel32({0x0F, static_cast<std::uint8_t>(0x80 + static_cast<int>(c))}, l); }
  void jcc_abs(Cond c, std::uint64_t target) {
    rel32_abs({0x0F, static_cast<std::uint8_t>(0x80 + static_cast<int>(c))}, target);
  }
  // Arbitrary opcode bytes followed by a rel32 to an absolute address.
  void branch_abs(std::initializer_list<std::uint8_t> opcode, std::uint64_t target) { rel32_abs(opcode, target); }
  void jcc8(Cond c, Label l) {
    u8(static_cast<std::uint8_t>(0x70 + static_cast<int>(c)));
    fixups_.push_back({bytes_.size(), l.id, 0, 1, false});
    u8(0);
  }
  void call(Label l, bool is_lookup = false) {
    if (is_lookup) effect(StackEffect::Kind::CallLookup);
    rel32({0xE8}, l);
  }
  void call_abs(std::uint64_t target, bool is_lookup = false) {
    if (is_lookup) effect(StackEffect::Kind::CallLookup);
    rel32_abs({0xE8}, target);
  }
  void jmp(const Mem& m) {
    stack_access(m, StackEffect::Kind::Read);
    op_modrm(false, {0xFF}, static_cast<Reg>(4), m);
  }
  void ret() { u8(0xC3); }
  void hlt() { u8(0xF4); }
  void ud2() { raw({0x0F, 0x0B}); }
  void syscall() { raw({0x0F, 0x05}); }

  // Resolve label fixups and return the finished code.
  std::vector<std::uint8_t> finish() {
    for (const auto& f : fixups_) {
      std::int64_t target;
      if (f.label >= 0) {
        const auto pos = label_pos_.at(static_cast<std::size_t>(f.label));
        if (pos < 0) fail(ErrorCode::InvalidStubTemplate, "unbound label");
        target = static_cast<std::int64_t>(origin_) + pos;
      } else {
        target = static_cast<std::int64_t>(f.absolute);
      }
      const std::int64_t next = static_cast<std::int64_t>(origin_ + f.at + f.width + f.trailing);
      const std::int64_t rel = target - next;
      if (f.width == 1) {
        if (!fits_i8(rel)) fail(ErrorCode::InvalidStubTemplate, "rel8 out of range");
        bytes_[f.at] = static_cast<std::uint8_t>(rel);
      } else {
        if (!fits_i32(rel)) fail(ErrorCode::UnsupportedOperand, "rel32 out of range");
        for (int i = 0; i < 4; ++i) bytes_[f.at + i] = static_cast<std::uint8_t>(rel >> (8 * i));
      }
    }
    fixups_.clear();
    return bytes_;
  }

 private:
  struct Fixup {
    std::size_t at;
    int label;
    std::uint64_t absolute;
    std::uint8_t width;
    bool unused;
    std::uint8_t trailing = 0;  // bytes of the instruction after the rel field
  };

  void effect(StackEffect::Kind k, std::int64_t disp = 0) { effects_.push_back({k, disp, bytes_.size()}); }

  void stack_access(const Mem& m, StackEffect::Kind k) {
    if (m.base && *m.base == rsp && !m.index && !m.rip) effect(k, m.disp);
  }

  void rex_if(bool w, int reg, int index, int base) {
    const std::uint8_t rex = static_cast<std::uint8_t>(0x40 | (w ? 8 : 0) | ((reg & 8) ? 4 : 0) |
                                                       ((index & 8) ? 2 : 0) | ((base & 8) ? 1 : 0));
    if (rex != 0x40) u8(rex);
  }

  void op_reg_reg(bool w, std::uint8_t opcode, Reg reg, Reg rm) {
    rex_if(w, reg, 0, rm);
    u8(opcode);
    u8(static_cast<std::uint8_t>(0xC0 | ((reg & 7) << 3) | (rm & 7)));
  }
  void op_reg_ext(bool w, std::uint8_t opcode, int ext, Reg rm) {
    rex_if(w, 0, 0, rm);
    u8(opcode);
    u8(static_cast<std::uint8_t>(0xC0 | (ext << 3) | (rm & 7)));
  }
  void alu_imm(int ext, Reg dst, std::int32_t imm) {
    op_reg_ext(true, 0x81, ext, dst);
    u32(static_cast<std::uint32_t>(imm));
  }

  // `trailing` is the number of immediate bytes that follow the ModRM
  // operand; RIP-relative displacements are relative to the instruction end.
  void op_modrm(bool w, std::initializer_list<std::uint8_t> opcode, Reg reg, const Mem& m,
                std::uint8_t trailing = 0) {
    const int base = m.base ? *m.base : 0;
    const int index = m.index ? *m.index : 0;
    rex_if(w, reg, index, base);
    for (auto b : opcode) u8(b);
    const int r = reg & 7;
    if (m.rip) {
      u8(static_cast<std::uint8_t>((r << 3) | 5));
      fixups_.push_back({bytes_.size(), m.rip_label, m.rip_target, 4, false, trailing});
      u32(0);
      return;
    }
    if (!m.base) {
      if (!fits_i32(m.disp)) fail(ErrorCode::UnsupportedOperand, "absolute address beyond disp32");
      u8(static_cast<std::uint8_t>((r << 3) | 4));
      u8(m.index ? static_cast<std::uint8_t>((scale_bits(m.scale) << 6) | ((index & 7) << 3) | 5) : 0x25);
      u32(static_cast<std::uint32_t>(m.disp));
      return;
    }
    if (!fits_i32(m.disp)) fail(ErrorCode::UnsupportedOperand, "displacement beyond disp32");
    const bool need_sib = m.index || (base & 7) == 4;
    int mod;
    if (m.disp == 0 && (base & 7) != 5) mod = 0;
    else if (fits_i8(m.disp)) mod = 1;
    else mod = 2;
    u8(static_cast<std::uint8_t>((mod << 6) | (r << 3) | (need_sib ? 4 : (base & 7))));
    if (need_sib) {
      const int idx = m.index ? (index & 7) : 4;
      u8(static_cast<std::uint8_t>((scale_bits(m.scale) << 6) | (idx << 3) | (base & 7)));
    }
    if (mod == 1) u8(static_cast<std::uint8_t>(m.disp));
    if (mod == 2) u32(static_cast<std::uint32_t>(m.disp));
  }

  static int scale_bits(std::uint8_t s) { return s == 8 ? 3 : s == 4 ? 2 : s == 2 ? 1 : 0; }

  void rel32(std::initializer_list<std::uint8_t> opcode, Label l) {
    for (auto b : opcode) u8(b);
    fixups_.push_back({bytes_.size(), l.id, 0, 4, false});
    u32(0);
  }
  void rel32_abs(std::initializer_list<std::uint8_t> opcode, std::uint64_t target) {
    for (auto b : opcode) u8(b);
    fixups_.push_back({bytes_.size(), -1, target, 4, false});
    u32(0);
  }

  std::uint64_t origin_;
  std::vector<std::uint8_t> bytes_;
  std::vector<std::int64_t> label_pos_;
  std::vector<Fixup> fixups_;
  std::vector<StackEffect> effects_;
};

}  // namespace tva::x86
