#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tupe {

inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;
inline constexpr int kMaskId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumSpecialTokens = 4;

inline constexpr std::string_view kSpecialTokens[kNumSpecialTokens] = {"[PAD]", "[CLS]", "[MASK]",
                                                                       "[UNK]"};

/// Character-level vocabulary. The first four entries are always the
/// reserved specials, in the order above.
class Vocab {
 public:
  /// Validates the reserved prefix and uniqueness.
  static Vocab from_tokens(std::vector<std::string> tokens);
  /// Specials followed by the given characters (one UTF-8 code point each).
  static Vocab from_characters(std::string_view chars);
  /// Specials, a-z, 0-9: the 40-token default alphabet.
  static Vocab default_characters();
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  /// Id of `token`, or [UNK].
  int id(std::string_view token) const;
  bool contains(std::string_view token) const;

  /// [CLS] followed by one id per code point of `line`, truncated to
  /// `max_length` ids in total.
  std::vector<int> encode_line(std::string_view line, std::size_t max_length) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Splits UTF-8 text into code points (invalid bytes become single-byte items).
std::vector<std::string> utf8_chars(std::string_view text);

}  // namespace tupe
