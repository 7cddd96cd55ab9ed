#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace frul {

/// Bad input: malformed files, invalid arguments, unknown config keys.
/// The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Failure while executing an otherwise valid request (IO, divergence,
/// extractor failure). The CLI maps this to exit code 2.
class RuntimeFailure : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Extractor transport failure that may succeed when retried.
class RetryableError : public RuntimeFailure {
  public:
    using RuntimeFailure::RuntimeFailure;
};

// 64-bit FNV-1a; used for config fingerprints and cache keys.
std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

// SHA-1 of "blob <size>\0<content>", as git computes object ids.
std::string git_blob_hash(std::string_view content);

std::string read_file(const std::filesystem::path& path);

/// Writes through a temporary sibling then renames, so readers never see a
/// partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

std::vector<std::string> split_lines(std::string_view text);

}  // namespace frul
