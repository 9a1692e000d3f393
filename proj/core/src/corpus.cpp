#include "forge/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <regex>
#include <set>
#include <unordered_map>

#include <fmt/format.h>

#include "forge/rng.hpp"

namespace forge::corpus {

namespace {

constexpr std::pair<Source, std::string_view> kSourceNames[] = {
    {Source::LLaVA, "LLaVA"},       {Source::SVIT, "SVIT"},        {Source::LLaVAR, "LLaVAR"},
    {Source::LRV, "LRV"},           {Source::LLaVAMed, "LLaVAMed"}, {Source::ComVint, "ComVint"},
    {Source::PMCVQA, "PMC-VQA"},    {Source::M3IT, "M3IT"},        {Source::PCAEVAL, "PCA-EVAL"},
    {Source::Custom, "custom"},
};

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) ==
                  std::tolower(static_cast<unsigned char>(y));
         });
}

bool valid_base64_body(std::string_view body) {
  if (body.empty() || body.size() % 4 != 0) return false;
  std::size_t pad = 0;
  for (std::size_t i = 0; i < body.size(); ++i) {
    char c = body[i];
    if (c == '=') {
      ++pad;
      if (i + 2 < body.size()) return false;
      continue;
    }
    if (pad > 0) return false;
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '+' || c == '/')) return false;
  }
  return pad <= 2;
}

std::string get_string(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw ValidationError(fmt::format("missing field '{}'", key));
  if (!it->is_string()) throw ValidationError(fmt::format("field '{}' must be a string", key));
  return it->get<std::string>();
}

}  // namespace

std::string_view to_string(Source s) {
  for (const auto& [src, name] : kSourceNames) {
    if (src == s) return name;
  }
  return "custom";
}

std::optional<Source> parse_source(std::string_view name) {
  for (const auto& [src, canonical] : kSourceNames) {
    if (iequals(name, canonical)) return src;
  }
  return std::nullopt;
}

const std::map<Source, std::size_t>& reference_quotas() {
  static const std::map<Source, std::size_t> quotas = {
      {Source::LLaVA, 19614}, {Source::SVIT, 22823},   {Source::LLaVAR, 13770},
      {Source::LRV, 12357},   {Source::LLaVAMed, 5861}, {Source::ComVint, 2384},
      {Source::PMCVQA, 2364}, {Source::M3IT, 687},     {Source::PCAEVAL, 398},
  };
  return quotas;
}

std::optional<AttachmentKind> classify_attachment(std::string_view ref, const fs::path& base_dir) {
  if (ref.empty()) return std::nullopt;
  if (ref.starts_with("data:")) {
    auto comma = ref.find(',');
    if (comma == std::string_view::npos) return std::nullopt;
    std::string_view header = ref.substr(5, comma - 5);
    if (!header.ends_with(";base64")) return std::nullopt;
    std::string_view mime = header.substr(0, header.size() - 7);
    if (mime.find('/') == std::string_view::npos) return std::nullopt;
    // Only the leading quantum group is checked; the payload stays opaque.
    std::string_view body = ref.substr(comma + 1);
    std::string_view head = body.substr(0, std::min<std::size_t>(body.size(), 64) / 4 * 4);
    if (head.empty() || !valid_base64_body(head)) return std::nullopt;
    return AttachmentKind::InlineBase64;
  }
  if (ref.starts_with("http://") || ref.starts_with("https://")) {
    static const std::regex url_re(R"(^https?://[A-Za-z0-9.\-]+(:[0-9]{1,5})?(/[^\s]*)?$)");
    if (!std::regex_match(ref.begin(), ref.end(), url_re)) return std::nullopt;
    return AttachmentKind::Url;
  }
  fs::path p(ref);
  if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
  std::error_code ec;
  if (fs::is_regular_file(p, ec)) return AttachmentKind::Path;
  return std::nullopt;
}

const InstructionRecord* InstructionSet::find(std::string_view id) const {
  for (const auto& r : records) {
    if (r.id == id) return &r;
  }
  return nullptr;
}

Manifest count_sources(const std::vector<InstructionRecord>& records) {
  Manifest m;
  for (const auto& r : records) ++m[r.source];
  return m;
}

void check_invariants(const InstructionSet& set) {
  std::set<std::string_view> ids;
  for (const auto& r : set.records) {
    if (!ids.insert(r.id).second) throw ValidationError(fmt::format("duplicate id '{}'", r.id));
  }
  Manifest stored;
  for (const auto& [src, n] : set.manifest) {
    if (n > 0) stored[src] = n;
  }
  if (stored != count_sources(set.records)) {
    throw ValidationError("manifest counts disagree with records");
  }
}

json to_json(const InstructionRecord& r) {
  return json{{"id", r.id}, {"source", to_string(r.source)}, {"images", r.images}, {"prompt", r.prompt}};
}

InstructionRecord record_from_json(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ValidationError("record is not an object");
  InstructionRecord r;
  r.id = get_string(j, "id");
  if (trim(r.id).empty()) throw ValidationError("empty id");
  r.prompt = get_string(j, "prompt");
  if (trim(r.prompt).empty()) throw ValidationError("prompt is empty");
  if (auto it = j.find("source"); it != j.end()) {
    if (!it->is_string()) throw ValidationError("field 'source' must be a string");
    auto src = parse_source(it->get<std::string>());
    if (!src) throw ValidationError(fmt::format("unknown source '{}'", it->get<std::string>()));
    r.source = *src;
  }
  if (auto it = j.find("images"); it != j.end()) {
    if (!it->is_array()) throw ValidationError("field 'images' must be an array");
    for (const auto& img : *it) {
      if (!img.is_string()) throw ValidationError("image references must be strings");
      auto ref = img.get<std::string>();
      auto kind = classify_attachment(ref, base_dir);
      if (!kind) throw ValidationError(fmt::format("malformed image reference '{}'", ref.substr(0, 80)));
      if (*kind == AttachmentKind::Path) {
        fs::path p(ref);
        if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
        ref = fs::weakly_canonical(p).string();
      }
      r.images.push_back(std::move(ref));
    }
  }
  return r;
}

LoadResult load_instructions(const std::vector<fs::path>& paths, std::optional<Source> source_tag) {
  LoadResult result;
  struct Origin {
    std::string file;
    std::size_t line;
  };
  std::unordered_map<std::string, Origin> seen;

  for (const auto& path : paths) {
    auto lines = read_jsonl(path);  // throws IoError when unreadable
    const fs::path base_dir = fs::absolute(path).parent_path();
    const std::string file = path.string();
    for (auto& line : lines) {
      if (!line.value) {
        result.errors.push_back({file, line.line_no, "malformed JSON: " + line.parse_error});
        continue;
      }
      try {
        const bool has_source = line.value->contains("source");
        InstructionRecord rec = record_from_json(*line.value, base_dir);
        if (source_tag) {
          if (!has_source) {
            rec.source = *source_tag;
          } else if (rec.source != *source_tag) {
            throw ValidationError(fmt::format("source '{}' conflicts with tag '{}'",
                                              to_string(rec.source), to_string(*source_tag)));
          }
        }
        auto [it, inserted] = seen.try_emplace(rec.id, Origin{file, line.line_no});
        if (!inserted) {
          throw ValidationError(fmt::format("duplicate id '{}' (first seen at {}:{}, again at {}:{})",
                                            rec.id, it->second.file, it->second.line, file,
                                            line.line_no));
        }
        result.set.records.push_back(std::move(rec));
      } catch (const ValidationError& e) {
        result.errors.push_back({file, line.line_no, e.what()});
      }
    }
  }
  result.set.manifest = count_sources(result.set.records);
  return result;
}

InstructionSet sample_mixture(const InstructionSet& set, const std::map<Source, std::size_t>& quotas,
                              std::uint64_t seed) {
  std::map<Source, std::vector<std::size_t>> by_source;
  for (std::size_t i = 0; i < set.records.size(); ++i) by_source[set.records[i].source].push_back(i);

  for (const auto& [src, quota] : quotas) {
    std::size_t available = by_source.count(src) ? by_source[src].size() : 0;
    if (quota > available) {
      throw ValidationError(fmt::format("quota for {} is {} but only {} records are available",
                                        to_string(src), quota, available));
    }
  }

  InstructionSet out;
  out.seed = seed;
  for (Source src : kAllSources) {
    auto q = quotas.find(src);
    if (q == quotas.end() || q->second == 0) continue;
    const auto& members = by_source[src];
    Rng rng(derive_seed(seed, to_string(src)));
    auto picks = rng.sample_indices(members.size(), q->second);
    std::sort(picks.begin(), picks.end());
    for (auto p : picks) out.records.push_back(set.records[members[p]]);
    out.manifest[src] = q->second;
  }
  return out;
}

std::map<Source, std::size_t> load_quotas(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
  if (!j.is_object()) throw ValidationError(fmt::format("{}: quotas must be an object", path.string()));
  std::map<Source, std::size_t> quotas;
  for (const auto& [name, value] : j.items()) {
    auto src = parse_source(name);
    if (!src) throw ValidationError(fmt::format("{}: unknown source '{}'", path.string(), name));
    if (!value.is_number_unsigned()) {
      throw ValidationError(fmt::format("{}: quota for {} must be a non-negative integer", path.string(), name));
    }
    quotas[*src] = value.get<std::size_t>();
  }
  return quotas;
}

json manifest_to_json(const InstructionSet& set) {
  json counts = json::object();
  std::size_t total = 0;
  for (Source src : kAllSources) {
    auto it = set.manifest.find(src);
    if (it == set.manifest.end() || it->second == 0) continue;
    counts[std::string(to_string(src))] = it->second;
    total += it->second;
  }
  json j{{"counts", counts}, {"total", total}};
  j["seed"] = set.seed ? json(*set.seed) : json(nullptr);
  return j;
}

void write_instruction_set(const InstructionSet& set, const fs::path& path) {
  std::string body;
  for (const auto& r : set.records) {
    body += to_json(r).dump();
    body += '\n';
  }
  write_file_atomic(path, body);
  fs::path manifest_path = path;
  manifest_path += ".manifest.json";
  write_file_atomic(manifest_path, manifest_to_json(set).dump(2) + "\n");
}

}  // namespace forge::corpus
