// Line-delimited record files, digests, clocks and the shared error types.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace forge {

using json = nlohmann::json;
namespace fs = std::filesystem;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input that violates a documented contract (bad record, bad config, bad argument).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// One physical line of a record file. `value` is empty when the line is not valid JSON;
/// `parse_error` then carries the reason.
struct JsonLine {
  std::size_t line_no = 0;
  std::optional<json> value;
  std::string parse_error;
};

/// Reads every non-blank line of a line-delimited JSON file. A trailing fragment
/// without a newline (torn write) is ignored.
std::vector<JsonLine> read_jsonl(const fs::path& path);

/// Strict variant: throws ValidationError naming the file and line on the first bad line.
std::vector<json> read_jsonl_strict(const fs::path& path);

/// Append-only writer. Opening repairs a torn tail left by a killed process by
/// truncating back to the last newline. Appends are serialized.
class JsonlAppender {
 public:
  explicit JsonlAppender(fs::path path);

  JsonlAppender(const JsonlAppender&) = delete;
  JsonlAppender& operator=(const JsonlAppender&) = delete;

  void append(const json& record);
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  std::ofstream out_;
  std::mutex mu_;
};

/// Drops any bytes after the final newline. Returns the number of bytes removed.
std::size_t repair_torn_tail(const fs::path& path);

/// Writes the whole file through a temporary sibling and a rename.
void write_file_atomic(const fs::path& path, std::string_view contents);
std::string read_file(const fs::path& path);

std::string sha256_hex(std::string_view data);
/// Digest of a file's bytes, or of a directory's sorted (relative path, file digest) list.
std::string sha256_path(const fs::path& path);

/// Produces RFC 3339 UTC timestamps. A fixed clock makes reruns byte-identical.
using Clock = std::function<std::string()>;
Clock system_clock();
Clock fixed_clock(std::string timestamp);
std::string utc_now_iso();

/// FORGE_HOME, or ".forge" under the working directory.
fs::path forge_home();

std::string trim(std::string_view s);

}  // namespace forge
