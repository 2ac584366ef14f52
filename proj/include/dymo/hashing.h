#ifndef DYMO_HASHING_H_
#define DYMO_HASHING_H_

#include <span>
#include <string>
#include <string_view>

namespace dymo {

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_hex(std::span<const double> values);
std::string sha256_file(const std::string& path);

}  // namespace dymo

#endif  // DYMO_HASHING_H_
