#pragma once

#include <string>
#include <string_view>

namespace gfsl {

/// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

/// Content hash of a file; throws ConfigError when the file cannot be read.
std::string sha256_file(const std::string& path);

}  // namespace gfsl
