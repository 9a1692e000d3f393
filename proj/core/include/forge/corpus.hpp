// Instruction ingestion and per-source mixture sampling.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "forge/io.hpp"

namespace forge::corpus {

/// Instruction sources. Order here is the canonical iteration order everywhere
/// (manifests, sampling streams, reports).
enum class Source {
  LLaVA,
  SVIT,
  LLaVAR,
  LRV,
  LLaVAMed,
  ComVint,
  PMCVQA,
  M3IT,
  PCAEVAL,
  Custom,
};

inline constexpr Source kAllSources[] = {
    Source::LLaVA,   Source::SVIT,  Source::LLaVAR, Source::LRV,     Source::LLaVAMed,
    Source::ComVint, Source::PMCVQA, Source::M3IT,  Source::PCAEVAL, Source::Custom,
};

std::string_view to_string(Source s);
/// Accepts the canonical names ("PMC-VQA", "PCA-EVAL", ...) case-insensitively.
std::optional<Source> parse_source(std::string_view name);

/// Per-source instruction counts of the reference mixture; they total 80,258.
const std::map<Source, std::size_t>& reference_quotas();

enum class AttachmentKind { Path, Url, InlineBase64 };

/// Syntactic check of an image reference: an existing file (relative paths are
/// resolved against `base_dir`), an http(s) URL with a host, or a
/// `data:<mime>;base64,` payload. Nothing is fetched or decoded beyond the header.
std::optional<AttachmentKind> classify_attachment(std::string_view ref, const fs::path& base_dir);

struct InstructionRecord {
  std::string id;
  Source source = Source::Custom;
  std::vector<std::string> images;
  std::string prompt;

  friend bool operator==(const InstructionRecord&, const InstructionRecord&) = default;
};

using Manifest = std::map<Source, std::size_t>;

struct InstructionSet {
  std::vector<InstructionRecord> records;
  Manifest manifest;
  std::optional<std::uint64_t> seed;

  std::size_t size() const { return records.size(); }
  const InstructionRecord* find(std::string_view id) const;
};

/// Recount of per-source records; sources with zero records are omitted.
Manifest count_sources(const std::vector<InstructionRecord>& records);

/// Throws ValidationError if ids repeat or the stored manifest disagrees with the records.
void check_invariants(const InstructionSet& set);

struct RecordError {
  std::string file;
  std::size_t line = 0;
  std::string message;
};

struct LoadResult {
  InstructionSet set;
  std::vector<RecordError> errors;
};

/// Loads line-delimited instruction files. Invalid lines land in `errors`; an
/// unreadable file throws IoError. `source_tag` fills in records without a
/// source and must agree with records that carry one.
LoadResult load_instructions(const std::vector<fs::path>& paths,
                             std::optional<Source> source_tag = std::nullopt);

/// Uniform sampling without replacement within each source. Sources missing from
/// `quotas` contribute nothing. Each source draws from its own stream keyed by
/// (seed, source name) and keeps the input's relative order in the output.
InstructionSet sample_mixture(const InstructionSet& set, const std::map<Source, std::size_t>& quotas,
                              std::uint64_t seed);

/// Quota files are JSON objects {"<source name>": count, ...}.
std::map<Source, std::size_t> load_quotas(const fs::path& path);

json to_json(const InstructionRecord& r);
InstructionRecord record_from_json(const json& j, const fs::path& base_dir = {});
json manifest_to_json(const InstructionSet& set);

/// Writes records to `path` and the manifest to `path` + ".manifest.json".
void write_instruction_set(const InstructionSet& set, const fs::path& path);

}  // namespace forge::corpus
