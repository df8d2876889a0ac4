#pragma once

// On-disk formats shared with the hidden-state extractor.
//
// Every binary payload is raw little-endian IEEE-754 binary32, row-major, with
// no header, padding, or compression: the byte length is fully determined by
// the dimensions recorded in the sibling manifest.json.
//
//   dump/       manifest.json + states.bin   [layer][token][dim]
//   embeddings/ manifest.json + embeds.bin   [row][vocab]
//   unembed.bin                               [vocab][dim]
//   vocab.txt   one token per line, id = zero-based line index
//   labels.csv  header image_id,criterion,label

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace esmc {

inline constexpr const char* kDumpLayout = "layer_token_dim_f32_le";
inline constexpr const char* kEmbeddingLayout = "row_vocab_f32_le";

using TokenId = std::int64_t;

// Half-open range [start, end) of token positions.
struct TokenRange {
  std::int64_t start = 0;
  std::int64_t end = 0;

  std::int64_t size() const { return end - start; }
  bool contains(std::int64_t p) const { return p >= start && p < end; }
  bool operator==(const TokenRange&) const = default;
};

// Hidden states of one (image, prompt) forward pass.
struct HiddenStateDump {
  std::string image_id;
  std::string prompt;
  std::int64_t num_layers = 0;
  std::int64_t num_tokens = 0;
  std::int64_t d_model = 0;
  std::vector<std::string> token_strings;
  TokenRange text_token_range;
  // Extra string-valued manifest keys (e.g. model, state_kind) carried through
  // unchanged.
  std::map<std::string, std::string> metadata;
  std::vector<float> states;

  std::span<const float> state(std::int64_t layer, std::int64_t token) const {
    return {states.data() + static_cast<std::size_t>((layer * num_tokens + token) * d_model),
            static_cast<std::size_t>(d_model)};
  }

  bool operator==(const HiddenStateDump&) const = default;
};

struct UnembeddingMatrix {
  std::int64_t vocab_size = 0;
  std::int64_t d_model = 0;
  std::vector<float> weights;  // [vocab_size][d_model]

  std::span<const float> row(std::int64_t v) const {
    return {weights.data() + static_cast<std::size_t>(v * d_model), static_cast<std::size_t>(d_model)};
  }

  bool operator==(const UnembeddingMatrix&) const = default;
};

class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  // Lowest id whose token string equals `text`.
  std::optional<TokenId> find(const std::string& text) const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, TokenId> first_index_;
};

struct LabelRow {
  std::string image_id;
  std::string criterion;
  std::string label;
  bool operator==(const LabelRow&) const = default;
};

class LabelTable {
 public:
  LabelTable() = default;
  // Throws ValidationError on a duplicate (image_id, criterion) pair.
  explicit LabelTable(std::vector<LabelRow> rows);

  const std::vector<LabelRow>& rows() const { return rows_; }
  std::vector<std::string> criteria() const;
  // image_id -> label for one criterion; empty when the criterion is unknown.
  std::map<std::string, std::string> labels_for(const std::string& criterion) const;

  bool operator==(const LabelTable& other) const { return rows_ == other.rows_; }

 private:
  std::vector<LabelRow> rows_;
};

// Where the rows of an EmbeddingSet were read from.
struct EmbeddingSource {
  std::string feature;
  std::int64_t layer = 0;
  std::int64_t position = 0;
  bool operator==(const EmbeddingSource&) const = default;
};

struct EmbeddingSet {
  std::int64_t n = 0;
  std::int64_t vocab_size = 0;
  std::vector<std::string> image_ids;
  EmbeddingSource source;
  bool normalized = true;
  std::vector<float> matrix;  // [n][vocab_size]

  std::span<const float> row(std::int64_t i) const {
    return {matrix.data() + static_cast<std::size_t>(i * vocab_size), static_cast<std::size_t>(vocab_size)};
  }

  bool operator==(const EmbeddingSet&) const = default;
};

// Invariant checks. Each throws ValidationError describing the first
// violation found.
void validate(const HiddenStateDump& dump);
void validate(const UnembeddingMatrix& w);
void validate(const EmbeddingSet& set);

void write_dump(const HiddenStateDump& dump, const std::filesystem::path& dir);
HiddenStateDump read_dump(const std::filesystem::path& dir);
// Every immediate subdirectory of `root` holding a manifest.json, sorted by
// directory name.
std::vector<std::filesystem::path> list_dump_dirs(const std::filesystem::path& root);

void write_unembedding(const UnembeddingMatrix& w, const std::filesystem::path& path);
UnembeddingMatrix read_unembedding(const std::filesystem::path& path, std::int64_t vocab_size,
                                   std::int64_t d_model);

void write_vocab(const Vocab& vocab, const std::filesystem::path& path);
Vocab read_vocab(const std::filesystem::path& path);

void write_labels(const LabelTable& table, const std::filesystem::path& path);
LabelTable read_labels(const std::filesystem::path& path);

void write_embeddings(const EmbeddingSet& set, const std::filesystem::path& dir);
EmbeddingSet read_embeddings(const std::filesystem::path& dir);

// Raw little-endian f32 helpers shared by the other on-disk artifacts.
void write_f32_file(const std::filesystem::path& path, std::span<const float> values);
std::vector<float> read_f32_file(const std::filesystem::path& path, std::size_t expected_count);

// Minimal RFC 4180 splitting of one CSV line; throws ValidationError naming
// `line_no` when quoting is malformed.
std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no);
std::string csv_escape(const std::string& field);

}  // namespace esmc
