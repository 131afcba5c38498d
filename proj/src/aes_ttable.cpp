#include "rowfault/aes_ttable.hpp"

#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace rowfault::aes {

namespace {

constexpr Byte gf_inverse(Byte a) {
  // a^254 = a^-1 in GF(2^8); 0 maps to 0.
  Byte result = 1;
  Byte base = a;
  int e = 254;
  while (e) {
    if (e & 1) result = gf_mul(result, base);
    base = gf_mul(base, base);
    e >>= 1;
  }
  return a ? result : 0;
}

constexpr Byte rotl8(Byte x, int n) {
  return static_cast<Byte>((x << n) | (x >> (8 - n)));
}

constexpr std::array<Byte, 256> make_sbox() {
  std::array<Byte, 256> s{};
  for (int x = 0; x < 256; ++x) {
    const Byte b = gf_inverse(static_cast<Byte>(x));
    s[x] = static_cast<Byte>(b ^ rotl8(b, 1) ^ rotl8(b, 2) ^ rotl8(b, 3) ^
                             rotl8(b, 4) ^ 0x63);
  }
  return s;
}

constexpr std::array<Byte, 256> make_inv_sbox(const std::array<Byte, 256>& s) {
  std::array<Byte, 256> inv{};
  for (int x = 0; x < 256; ++x) inv[s[x]] = static_cast<Byte>(x);
  return inv;
}

constexpr std::array<Byte, 256> kSbox = make_sbox();
constexpr std::array<Byte, 256> kInvSbox = make_inv_sbox(kSbox);

static_assert(kSbox[0x00] == 0x63 && kSbox[0x01] == 0x7c && kSbox[0x53] == 0xed);

constexpr Word sub_word(Word w) {
  return make_word(kSbox[word_byte(w, 0)], kSbox[word_byte(w, 1)],
                   kSbox[word_byte(w, 2)], kSbox[word_byte(w, 3)]);
}

constexpr Word rot_word(Word w) { return (w << 8) | (w >> 24); }

constexpr std::array<Byte, 10> kRcon = {0x01, 0x02, 0x04, 0x08, 0x10,
                                        0x20, 0x40, 0x80, 0x1b, 0x36};

constexpr Word kRowMask[4] = {0xff000000u, 0x00ff0000u, 0x0000ff00u,
                              0x000000ffu};

// State byte feeding row `row` of output column `col` (ShiftRows folded in).
constexpr int shifted_position(int col, int row) {
  return 4 * ((col + row) & 3) + row;
}

Word load_column(const Block& b, int col) {
  return make_word(b[4 * col], b[4 * col + 1], b[4 * col + 2], b[4 * col + 3]);
}

void store_column(Block& b, int col, Word w) {
  for (int r = 0; r < 4; ++r) b[4 * col + r] = word_byte(w, r);
}

struct NoTrace {
  void record(int, int, int, Byte, bool) {}
};

struct RecordTrace {
  AccessTrace* trace;
  int next = 0;
  void record(int round, int position, int table_id, Byte index,
              bool last_round_table) {
    (*trace)[next++] = TableAccess{static_cast<Byte>(round),
                                   static_cast<Byte>(position),
                                   static_cast<Byte>(table_id), index,
                                   last_round_table};
  }
};

template <typename Sink>
Block run_cipher(const Block& plaintext, const RoundKeys& keys,
                 const TTableSet& tables, Sink& sink) {
  Block state{};
  for (int c = 0; c < 4; ++c) {
    store_column(state, c, load_column(plaintext, c) ^ keys.rk[c]);
  }

  for (int round = 1; round < kRounds; ++round) {
    Block next{};
    for (int c = 0; c < 4; ++c) {
      Word acc = keys.rk[4 * round + c];
      for (int r = 0; r < 4; ++r) {
        const int pos = shifted_position(c, r);
        const Byte idx = state[pos];
        sink.record(round, pos, r, idx, false);
        acc ^= tables.te[r][idx];
      }
      store_column(next, c, acc);
    }
    state = next;
  }

  const bool primed = tables.style == TableStyle::SeparateLastRound;
  Block out{};
  for (int c = 0; c < 4; ++c) {
    Word acc = keys.rk[4 * kRounds + c];
    for (int r = 0; r < 4; ++r) {
      const int pos = shifted_position(c, r);
      const Byte idx = state[pos];
      int table_id = 0;
      acc ^= last_round_lookup(tables, r, idx, &table_id);
      sink.record(kRounds, pos, table_id, idx, primed);
    }
    store_column(out, c, acc);
  }
  return out;
}

Byte hex_nibble(char c) {
  if (c >= '0' && c <= '9') return static_cast<Byte>(c - '0');
  if (c >= 'a' && c <= 'f') return static_cast<Byte>(c - 'a' + 10);
  if (c >= 'A' && c <= 'F') return static_cast<Byte>(c - 'A' + 10);
  throw std::invalid_argument(std::string("bad hex digit '") + c + "'");
}

}  // namespace

const std::array<Byte, 256>& sbox() { return kSbox; }
const std::array<Byte, 256>& inv_sbox() { return kInvSbox; }

const Table& TTableSet::table(int table_id, bool last_round_table) const {
  if (table_id < 0 || table_id > 3) {
    throw std::out_of_range("table id must be 0..3");
  }
  if (last_round_table) {
    if (!last_round) {
      throw std::invalid_argument("table set has no last-round tables");
    }
    return (*last_round)[table_id];
  }
  return te[table_id];
}

Table& TTableSet::table(int table_id, bool last_round_table) {
  return const_cast<Table&>(
      static_cast<const TTableSet&>(*this).table(table_id, last_round_table));
}

Block RoundKeys::round_key(int round) const {
  if (round < 0 || round > kRounds) {
    throw std::out_of_range("round key index must be 0..10");
  }
  Block b{};
  for (int c = 0; c < 4; ++c) store_column(b, c, rk[4 * round + c]);
  return b;
}

TTableSet derive_tables(TableStyle style) {
  TTableSet t;
  t.style = style;
  for (int x = 0; x < 256; ++x) {
    const Byte s = kSbox[x];
    t.te[0][x] = make_word(gf_mul(s, 2), s, s, gf_mul(s, 3));
    for (int j = 1; j < 4; ++j) t.te[j][x] = rotr8(t.te[j - 1][x]);
  }
  if (style == TableStyle::SeparateLastRound) {
    std::array<Table, 4> primed{};
    for (int j = 0; j < 4; ++j) {
      for (int x = 0; x < 256; ++x) primed[j][x] = Word{kSbox[x]} * 0x01010101u;
    }
    t.last_round = primed;
  }
  return t;
}

RoundKeys expand_key(std::span<const Byte> key) {
  if (key.size() != 16) {
    throw std::invalid_argument("AES-128 key must be 16 bytes, got " +
                                std::to_string(key.size()));
  }
  RoundKeys keys;
  for (int i = 0; i < 4; ++i) {
    keys.rk[i] = make_word(key[4 * i], key[4 * i + 1], key[4 * i + 2],
                           key[4 * i + 3]);
  }
  for (int i = 4; i < 44; ++i) {
    Word temp = keys.rk[i - 1];
    if (i % 4 == 0) {
      temp = sub_word(rot_word(temp)) ^ (Word{kRcon[i / 4 - 1]} << 24);
    }
    keys.rk[i] = keys.rk[i - 4] ^ temp;
  }
  return keys;
}

Block recover_master_key(const Block& k10) {
  std::array<Word, 44> w{};
  for (int c = 0; c < 4; ++c) w[40 + c] = load_column(k10, c);
  for (int i = 43; i >= 4; --i) {
    Word temp = w[i - 1];
    if (i % 4 == 0) {
      temp = sub_word(rot_word(temp)) ^ (Word{kRcon[i / 4 - 1]} << 24);
    }
    w[i - 4] = w[i] ^ temp;
  }
  Block key{};
  for (int c = 0; c < 4; ++c) store_column(key, c, w[c]);
  return key;
}

Encryption encrypt(const Block& plaintext, const RoundKeys& keys,
                   const TTableSet& tables) {
  Encryption e;
  RecordTrace sink{&e.trace};
  e.ciphertext = run_cipher(plaintext, keys, tables, sink);
  return e;
}

Block encrypt_block(const Block& plaintext, const RoundKeys& keys,
                    const TTableSet& tables) {
  NoTrace sink;
  return run_cipher(plaintext, keys, tables, sink);
}

int last_round_table_for_row(TableStyle style, int row) {
  // Shared tables: the S-box byte of Te_j sits at byte (j + 2) mod 4, so row
  // r reads Te_{(r+2) mod 4}. Primed tables carry S replicated; row r reads
  // T'_r.
  return style == TableStyle::SharedTables ? (row + 2) & 3 : row;
}

Word last_round_lookup(const TTableSet& tables, int row, Byte index,
                       int* table_id) {
  const int id = last_round_table_for_row(tables.style, row);
  if (table_id) *table_id = id;
  const bool primed = tables.style == TableStyle::SeparateLastRound;
  const Table& t = primed ? (*tables.last_round)[id] : tables.te[id];
  return t[index] & kRowMask[row];
}

void validate(const PersistentFault& fault, const TTableSet& tables) {
  if (fault.xor_mask == 0) {
    throw std::invalid_argument("fault xor mask must be nonzero");
  }
  (void)tables.table(fault.table_id, fault.last_round_table);
}

TTableSet inject_fault(const TTableSet& tables, const PersistentFault& fault) {
  validate(fault, tables);
  TTableSet out = tables;
  out.table(fault.table_id, fault.last_round_table)[fault.entry_index] ^=
      fault.xor_mask;
  return out;
}

TTableSet clear_fault(const TTableSet& tables, const PersistentFault& fault) {
  validate(fault, tables);
  const TTableSet pristine = derive_tables(tables.style);
  const Word expected =
      pristine.table(fault.table_id, fault.last_round_table)[fault.entry_index];
  const Word current =
      tables.table(fault.table_id, fault.last_round_table)[fault.entry_index];
  if ((current ^ fault.xor_mask) != expected) {
    throw std::logic_error("clear_fault: entry " +
                           std::to_string(fault.entry_index) + " of table " +
                           std::to_string(fault.table_id) +
                           " does not carry this fault");
  }
  TTableSet out = tables;
  out.table(fault.table_id, fault.last_round_table)[fault.entry_index] =
      expected;
  return out;
}

std::string to_hex(std::span<const Byte> bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s;
  s.reserve(bytes.size() * 2);
  for (Byte b : bytes) {
    s.push_back(kDigits[b >> 4]);
    s.push_back(kDigits[b & 0xf]);
  }
  return s;
}

Block parse_block(std::string_view hex) {
  if (hex.size() != 32) {
    throw std::invalid_argument("block hex must be 32 characters, got " +
                                std::to_string(hex.size()));
  }
  Block b{};
  for (int i = 0; i < 16; ++i) {
    b[i] = static_cast<Byte>((hex_nibble(hex[2 * i]) << 4) |
                             hex_nibble(hex[2 * i + 1]));
  }
  return b;
}

std::string word_hex(Word w) {
  const std::array<Byte, 4> bytes = {word_byte(w, 0), word_byte(w, 1),
                                     word_byte(w, 2), word_byte(w, 3)};
  return to_hex(bytes);
}

std::vector<TestVector> read_test_vectors(std::istream& in) {
  std::vector<TestVector> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string k, p, c;
    if (!std::getline(fields, k, ',') || !std::getline(fields, p, ',') ||
        !std::getline(fields, c)) {
      throw std::invalid_argument("test vector line " +
                                  std::to_string(line_no) +
                                  ": expected key,pt,ct");
    }
    out.push_back({parse_block(k), parse_block(p), parse_block(c)});
  }
  return out;
}

void write_test_vectors(std::ostream& out,
                        std::span<const TestVector> vectors) {
  for (const auto& v : vectors) {
    out << to_hex(v.key) << ',' << to_hex(v.plaintext) << ','
        << to_hex(v.ciphertext) << '\n';
  }
}

}  // namespace rowfault::aes
