#pragma once

// T-table AES-128 in two layouts (OpenSSL-like shared tables and a
// Libgcrypt-like separate last-round set), with persistent fault injection
// and an instrumented encryption that records every table lookup.
//
// Word convention: byte 0 of a 32-bit table word is the most significant
// byte, and byte r of a column word is state row r. Te0[x] therefore reads
// (2*S[x], S[x], S[x], 3*S[x]) from the top byte down.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rowfault::aes {

using Byte = std::uint8_t;
using Word = std::uint32_t;
using Block = std::array<Byte, 16>;
using Column = std::array<Byte, 4>;
using Table = std::array<Word, 256>;

inline constexpr int kRounds = 10;
inline constexpr int kAccessesPerRound = 16;
inline constexpr int kAccessesPerEncryption = kRounds * kAccessesPerRound;

enum class TableStyle {
  SharedTables,      // one table set for all rounds, masked last round
  SeparateLastRound  // Te0..Te3 for rounds 1..9, primed tables for round 10
};

const std::array<Byte, 256>& sbox();
const std::array<Byte, 256>& inv_sbox();

// GF(2^8) multiplication modulo x^8 + x^4 + x^3 + x + 1.
constexpr Byte gf_mul(Byte a, Byte b) {
  Byte r = 0;
  while (b) {
    if (b & 1) r ^= a;
    a = static_cast<Byte>((a << 1) ^ ((a & 0x80) ? 0x1b : 0x00));
    b >>= 1;
  }
  return r;
}

constexpr Byte word_byte(Word w, int byte) {
  return static_cast<Byte>(w >> (24 - 8 * byte));
}

constexpr Word make_word(Byte b0, Byte b1, Byte b2, Byte b3) {
  return (Word{b0} << 24) | (Word{b1} << 16) | (Word{b2} << 8) | Word{b3};
}

constexpr Word rotr8(Word w) { return (w >> 8) | (w << 24); }

struct TTableSet {
  TableStyle style = TableStyle::SharedTables;
  std::array<Table, 4> te{};
  std::optional<std::array<Table, 4>> last_round;

  const Table& table(int table_id, bool last_round_table) const;
  Table& table(int table_id, bool last_round_table);

  bool operator==(const TTableSet&) const = default;
};

struct RoundKeys {
  std::array<Word, 44> rk{};

  // Round key r (0..10) as 16 state bytes in column-major order.
  Block round_key(int round) const;

  bool operator==(const RoundKeys&) const = default;
};

// One persistent bit-level corruption of a table word. `last_round_table`
// selects the primed table of a SeparateLastRound set.
struct PersistentFault {
  int table_id = 0;
  Byte entry_index = 0;
  Word xor_mask = 0;
  bool last_round_table = false;

  bool operator==(const PersistentFault&) const = default;
};

struct TableAccess {
  Byte round = 0;     // 1..10
  Byte position = 0;  // state byte fed to the table, column-major index
  Byte table_id = 0;
  Byte index = 0;
  bool last_round_table = false;
};

using AccessTrace = std::array<TableAccess, kAccessesPerEncryption>;

struct Encryption {
  Block ciphertext{};
  AccessTrace trace{};
};

TTableSet derive_tables(TableStyle style);

RoundKeys expand_key(std::span<const Byte> key);

// Inverts the key schedule from the round-10 key back to the master key.
Block recover_master_key(const Block& k10);

Encryption encrypt(const Block& plaintext, const RoundKeys& keys,
                   const TTableSet& tables);

// Same cipher without recording the trace.
Block encrypt_block(const Block& plaintext, const RoundKeys& keys,
                    const TTableSet& tables);

// Round-10 contribution of one lookup for output row `row` (0..3): the table
// word ANDed with the single-byte mask of that row. Returns the table id
// consulted through `table_id` when non-null.
Word last_round_lookup(const TTableSet& tables, int row, Byte index,
                       int* table_id = nullptr);

// Table serving output row `row` in round 10.
int last_round_table_for_row(TableStyle style, int row);

void validate(const PersistentFault& fault, const TTableSet& tables);

TTableSet inject_fault(const TTableSet& tables, const PersistentFault& fault);

// Restores the faulted entry; throws std::logic_error when the entry does not
// carry exactly this fault.
TTableSet clear_fault(const TTableSet& tables, const PersistentFault& fault);

// Hex helpers (lowercase, no separators).
std::string to_hex(std::span<const Byte> bytes);
Block parse_block(std::string_view hex);
std::string word_hex(Word w);

struct TestVector {
  Block key{};
  Block plaintext{};
  Block ciphertext{};
};

// `key_hex,pt_hex,ct_hex` per line.
std::vector<TestVector> read_test_vectors(std::istream& in);
void write_test_vectors(std::ostream& out, std::span<const TestVector> vectors);

}  // namespace rowfault::aes
