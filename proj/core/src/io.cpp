#include "forge/io.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <ctime>
#include <cstdlib>
#include <sstream>

#include <fmt/format.h>
#include <openssl/evp.h>

namespace forge {

namespace {

bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (ctx_ == nullptr || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) {
      throw Error("sha256: digest init failed");
    }
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::string_view data) { EVP_DigestUpdate(ctx_, data.data(), data.size()); }

  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) out += fmt::format("{:02x}", md[i]);
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

}  // namespace

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n\f\v");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n\f\v");
  return std::string(s.substr(b, e - b + 1));
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<JsonLine> read_jsonl(const fs::path& path) {
  std::string data = read_file(path);
  auto last_nl = data.rfind('\n');
  // Bytes after the final newline belong to an interrupted append.
  if (last_nl == std::string::npos) {
    // A single-line file without a trailing newline is still a complete record.
    if (!data.empty()) data.push_back('\n');
  } else if (last_nl + 1 != data.size()) {
    auto tail = std::string_view(data).substr(last_nl + 1);
    if (json::accept(tail)) {
      data.push_back('\n');
    } else {
      data.resize(last_nl + 1);
    }
  }

  std::vector<JsonLine> lines;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < data.size()) {
    auto nl = data.find('\n', pos);
    std::string_view line(data.data() + pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (is_blank(line)) continue;
    JsonLine jl;
    jl.line_no = line_no;
    try {
      jl.value = json::parse(line);
    } catch (const json::parse_error& e) {
      jl.parse_error = e.what();
    }
    lines.push_back(std::move(jl));
  }
  return lines;
}

std::vector<json> read_jsonl_strict(const fs::path& path) {
  std::vector<json> out;
  for (auto& line : read_jsonl(path)) {
    if (!line.value) {
      throw ValidationError(
          fmt::format("{}:{}: malformed record: {}", path.string(), line.line_no, line.parse_error));
    }
    out.push_back(std::move(*line.value));
  }
  return out;
}

std::size_t repair_torn_tail(const fs::path& path) {
  if (!fs::exists(path)) return 0;
  std::string data = read_file(path);
  auto last_nl = data.rfind('\n');
  std::size_t keep = last_nl == std::string::npos ? 0 : last_nl + 1;
  if (keep == data.size()) return 0;
  fs::resize_file(path, keep);
  return data.size() - keep;
}

JsonlAppender::JsonlAppender(fs::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
  repair_torn_tail(path_);
  out_.open(path_, std::ios::binary | std::ios::app);
  if (!out_) throw IoError(fmt::format("cannot open {} for appending", path_.string()));
}

void JsonlAppender::append(const json& record) {
  std::string line = record.dump();
  line.push_back('\n');
  std::lock_guard lock(mu_);
  out_.write(line.data(), static_cast<std::streamsize>(line.size()));
  out_.flush();
  if (!out_) throw IoError(fmt::format("write failed on {}", path_.string()));
}

void write_file_atomic(const fs::path& path, std::string_view contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError(fmt::format("write failed on {}", path.string()));
  }
  fs::rename(tmp, path);
}

std::string sha256_hex(std::string_view data) {
  Sha256 h;
  h.update(data);
  return h.hex();
}

std::string sha256_path(const fs::path& path) {
  if (fs::is_directory(path)) {
    std::vector<std::pair<std::string, std::string>> entries;
    for (const auto& entry : fs::recursive_directory_iterator(path)) {
      if (!entry.is_regular_file()) continue;
      entries.emplace_back(fs::relative(entry.path(), path).generic_string(),
                           sha256_hex(read_file(entry.path())));
    }
    std::sort(entries.begin(), entries.end());
    Sha256 h;
    for (const auto& [name, digest] : entries) {
      h.update(name);
      h.update("\n");
      h.update(digest);
      h.update("\n");
    }
    return h.hex();
  }
  return sha256_hex(read_file(path));
}

std::string utc_now_iso() {
  auto now = std::chrono::system_clock::now();
  auto secs = std::chrono::time_point_cast<std::chrono::seconds>(now);
  std::time_t t = std::chrono::system_clock::to_time_t(secs);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Clock system_clock() { return [] { return utc_now_iso(); }; }

Clock fixed_clock(std::string timestamp) {
  return [ts = std::move(timestamp)] { return ts; };
}

fs::path forge_home() {
  if (const char* env = std::getenv("FORGE_HOME"); env != nullptr && *env != '\0') {
    return fs::path(env);
  }
  return fs::current_path() / ".forge";
}

}  // namespace forge
