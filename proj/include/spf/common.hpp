#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace spf {

// Runtime precondition / contract check. Throws with a formatted message so
// callers (and the CLI) can surface which input was bad.
#define SPF_CHECK(cond, msg)                                 \
  do {                                                       \
    if (!(cond)) {                                           \
      std::ostringstream oss_;                               \
      oss_ << "spf: " << msg;                                \
      throw std::runtime_error(oss_.str());                  \
    }                                                        \
  } while (0)

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stable stream-id derivation: one run seed fans out into independent seeds
// for actors, envs, the learner shuffle, eval matches, ...
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the tag
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(base ^ splitmix64(h) ^ splitmix64(index * 0x9e3779b97f4a7c15ULL + 1));
}

}  // namespace spf
