#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace thinksafe {

using TokenId = int;
using TokenSeq = std::vector<TokenId>;

// Byte tokens 0..255 plus four reserved specials. Only the literal markup
// "<think>" and "</think>" maps onto specials when encoding text; every other
// byte sequence encodes byte-for-byte.
struct Vocab {
  static constexpr int kSize = 260;
  static constexpr TokenId kThink = 256;
  static constexpr TokenId kEndThink = 257;
  static constexpr TokenId kEos = 258;
  static constexpr TokenId kPad = 259;

  static TokenSeq encode(std::string_view text);
  // <eos> and <pad> decode to nothing.
  static std::string decode(std::span<const TokenId> ids);
  static bool is_special(TokenId id) { return id >= 256; }
};

// Chat framing for the toy model: the user turn is closed by <eos>, the
// response follows and is itself closed by <eos>.
TokenSeq prompt_tokens(std::string_view prompt_text);
TokenSeq response_tokens(std::string_view raw_text);

// token_len used by dataset statistics: tokens of raw_text, no framing.
std::size_t token_length(std::string_view raw_text);

}  // namespace thinksafe
