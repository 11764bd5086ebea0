#pragma once

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace sei {

inline bool is_split_punct(char c) {
  return c == '.' || c == ',' || c == ':' || c == ';' || c == '/';
}

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
inline bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }

/// Shared tokenization convention for reports, entity spans, truncation and
/// n-gram metrics: lowercase, split on whitespace, and emit each of
/// `. , : ; /` as its own token. A period with a digit on both sides stays
/// inside the number ("1.9").
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (is_space(c)) {
      flush();
      continue;
    }
    if (is_split_punct(c)) {
      const bool decimal_point = c == '.' && i > 0 && i + 1 < text.size() &&
                                 is_digit(text[i - 1]) && is_digit(text[i + 1]);
      if (!decimal_point) {
        flush();
        tokens.emplace_back(1, c);
        continue;
      }
    }
    current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  flush();
  return tokens;
}

/// Plain whitespace split, no case folding.
inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

}  // namespace sei
