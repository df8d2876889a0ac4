#include "esmc/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "esmc/error.hpp"

namespace esmc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::set<std::string> kDumpKeys = {"layout",     "image_id",      "prompt",
                                         "num_layers", "num_tokens",    "d_model",
                                         "token_strings", "text_token_range"};

std::string quoted(const fs::path& p) { return "'" + p.string() + "'"; }

std::uint32_t load_le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void store_le32(std::uint32_t v, unsigned char* p) {
  p[0] = static_cast<unsigned char>(v);
  p[1] = static_cast<unsigned char>(v >> 8);
  p[2] = static_cast<unsigned char>(v >> 16);
  p[3] = static_cast<unsigned char>(v >> 24);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + quoted(path));
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed for " + quoted(path));
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + quoted(path) + " for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.close();
  if (!out) throw IoError("write failed for " + quoted(path));
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + quoted(dir));
}

json parse_json_file(const fs::path& path) {
  const std::string text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError("malformed JSON in " + quoted(path) + ": " + e.what());
  }
}

std::string dump_json(const json& j, const fs::path& path) {
  try {
    return j.dump(2) + "\n";
  } catch (const json::exception& e) {
    throw ValidationError("cannot serialise " + quoted(path) + ": " + e.what());
  }
}

std::int64_t require_int(const json& j, const char* key, const fs::path& path) {
  if (!j.contains(key) || !j[key].is_number_integer()) {
    throw FormatError(quoted(path) + ": missing or non-integer field '" + key + "'");
  }
  return j[key].get<std::int64_t>();
}

std::string require_string(const json& j, const char* key, const fs::path& path) {
  if (!j.contains(key) || !j[key].is_string()) {
    throw FormatError(quoted(path) + ": missing or non-string field '" + key + "'");
  }
  return j[key].get<std::string>();
}

void require_finite(std::span<const float> values, const std::string& what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw ValidationError(what + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Raw f32 payloads

void write_f32_file(const fs::path& path, std::span<const float> values) {
  std::string bytes(values.size() * 4, '\0');
  if constexpr (std::endian::native == std::endian::little) {
    if (!values.empty()) std::memcpy(bytes.data(), values.data(), bytes.size());
  } else {
    auto* out = reinterpret_cast<unsigned char*>(bytes.data());
    for (std::size_t i = 0; i < values.size(); ++i) {
      store_le32(std::bit_cast<std::uint32_t>(values[i]), out + 4 * i);
    }
  }
  write_text(path, bytes);
}

std::vector<float> read_f32_file(const fs::path& path, std::size_t expected_count) {
  std::error_code ec;
  const auto size = fs::file_size(path, ec);
  if (ec) throw IoError("cannot stat " + quoted(path));
  if (size != expected_count * 4) {
    throw FormatError("size mismatch for " + quoted(path) + ": " + std::to_string(size) +
                      " bytes on disk, manifest dimensions require " + std::to_string(expected_count * 4));
  }
  const std::string bytes = read_text(path);
  if (bytes.size() != expected_count * 4) throw IoError("short read on " + quoted(path));
  std::vector<float> values(expected_count);
  if constexpr (std::endian::native == std::endian::little) {
    if (expected_count) std::memcpy(values.data(), bytes.data(), bytes.size());
  } else {
    const auto* in = reinterpret_cast<const unsigned char*>(bytes.data());
    for (std::size_t i = 0; i < expected_count; ++i) values[i] = std::bit_cast<float>(load_le32(in + 4 * i));
  }
  return values;
}

// ---------------------------------------------------------------------------
// Hidden-state dumps

void validate(const HiddenStateDump& d) {
  const std::string who = "dump '" + d.image_id + "'";
  if (d.num_layers <= 0 || d.num_tokens <= 0 || d.d_model <= 0) {
    throw ValidationError(who + ": num_layers, num_tokens and d_model must be positive");
  }
  if (static_cast<std::int64_t>(d.token_strings.size()) != d.num_tokens) {
    throw ValidationError(who + ": " + std::to_string(d.token_strings.size()) + " token strings for " +
                          std::to_string(d.num_tokens) + " tokens");
  }
  const auto& r = d.text_token_range;
  if (r.start < 0 || r.start > r.end || r.end > d.num_tokens) {
    throw ValidationError(who + ": text_token_range [" + std::to_string(r.start) + ", " + std::to_string(r.end) +
                          ") must satisfy 0 <= start <= end <= " + std::to_string(d.num_tokens));
  }
  const auto expected = static_cast<std::size_t>(d.num_layers * d.num_tokens * d.d_model);
  if (d.states.size() != expected) {
    throw ValidationError(who + ": states hold " + std::to_string(d.states.size()) + " values, expected " +
                          std::to_string(expected));
  }
  for (const auto& [key, value] : d.metadata) {
    if (kDumpKeys.contains(key)) throw ValidationError(who + ": metadata key '" + key + "' is reserved");
  }
  require_finite(d.states, who);
}

void write_dump(const HiddenStateDump& dump, const fs::path& dir) {
  validate(dump);
  ensure_dir(dir);
  json m;
  for (const auto& [key, value] : dump.metadata) m[key] = value;
  m["layout"] = kDumpLayout;
  m["image_id"] = dump.image_id;
  m["prompt"] = dump.prompt;
  m["num_layers"] = dump.num_layers;
  m["num_tokens"] = dump.num_tokens;
  m["d_model"] = dump.d_model;
  m["token_strings"] = dump.token_strings;
  m["text_token_range"] = {{"start", dump.text_token_range.start}, {"end", dump.text_token_range.end}};
  const fs::path manifest = dir / "manifest.json";
  write_text(manifest, dump_json(m, manifest));
  write_f32_file(dir / "states.bin", dump.states);
}

HiddenStateDump read_dump(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.json";
  const json m = parse_json_file(manifest);
  if (!m.is_object()) throw FormatError(quoted(manifest) + ": top level must be an object");

  const std::string layout = require_string(m, "layout", manifest);
  if (layout != kDumpLayout) {
    throw FormatError(quoted(manifest) + ": unknown layout '" + layout + "' (expected '" + kDumpLayout + "')");
  }

  HiddenStateDump d;
  d.image_id = require_string(m, "image_id", manifest);
  d.prompt = require_string(m, "prompt", manifest);
  d.num_layers = require_int(m, "num_layers", manifest);
  d.num_tokens = require_int(m, "num_tokens", manifest);
  d.d_model = require_int(m, "d_model", manifest);
  if (d.num_layers <= 0 || d.num_tokens <= 0 || d.d_model <= 0) {
    throw ValidationError(quoted(manifest) + ": num_layers, num_tokens and d_model must be positive");
  }

  if (!m.contains("token_strings") || !m["token_strings"].is_array()) {
    throw FormatError(quoted(manifest) + ": missing array field 'token_strings'");
  }
  for (const auto& t : m["token_strings"]) {
    if (!t.is_string()) throw FormatError(quoted(manifest) + ": token_strings must be strings");
    d.token_strings.push_back(t.get<std::string>());
  }

  if (!m.contains("text_token_range") || !m["text_token_range"].is_object()) {
    throw FormatError(quoted(manifest) + ": missing object field 'text_token_range'");
  }
  d.text_token_range.start = require_int(m["text_token_range"], "start", manifest);
  d.text_token_range.end = require_int(m["text_token_range"], "end", manifest);

  for (const auto& [key, value] : m.items()) {
    if (!kDumpKeys.contains(key) && value.is_string()) d.metadata[key] = value.get<std::string>();
  }

  d.states = read_f32_file(dir / "states.bin", static_cast<std::size_t>(d.num_layers * d.num_tokens * d.d_model));
  validate(d);
  return d;
}

std::vector<fs::path> list_dump_dirs(const fs::path& root) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw IoError("dump root " + quoted(root) + " is not a directory");
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.json")) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

// ---------------------------------------------------------------------------
// Unembedding matrix

void validate(const UnembeddingMatrix& w) {
  if (w.vocab_size <= 0 || w.d_model <= 0) throw ValidationError("unembedding dimensions must be positive");
  if (w.weights.size() != static_cast<std::size_t>(w.vocab_size * w.d_model)) {
    throw ValidationError("unembedding holds " + std::to_string(w.weights.size()) + " values, expected " +
                          std::to_string(w.vocab_size * w.d_model));
  }
  require_finite(w.weights, "unembedding matrix");
}

void write_unembedding(const UnembeddingMatrix& w, const fs::path& path) {
  validate(w);
  write_f32_file(path, w.weights);
}

UnembeddingMatrix read_unembedding(const fs::path& path, std::int64_t vocab_size, std::int64_t d_model) {
  if (vocab_size <= 0 || d_model <= 0) throw ValidationError("unembedding dimensions must be positive");
  UnembeddingMatrix w;
  w.vocab_size = vocab_size;
  w.d_model = d_model;
  w.weights = read_f32_file(path, static_cast<std::size_t>(vocab_size * d_model));
  validate(w);
  return w;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) first_index_.try_emplace(tokens_[i], static_cast<TokenId>(i));
}

std::optional<TokenId> Vocab::find(const std::string& text) const {
  auto it = first_index_.find(text);
  if (it == first_index_.end()) return std::nullopt;
  return it->second;
}

void write_vocab(const Vocab& vocab, const fs::path& path) {
  std::string text;
  for (const auto& t : vocab.tokens()) {
    if (t.find('\n') != std::string::npos) throw ValidationError("vocab token contains a newline");
    text += t;
    text += '\n';
  }
  write_text(path, text);
}

Vocab read_vocab(const fs::path& path) {
  const std::string text = read_text(path);
  std::vector<std::string> tokens;
  std::size_t begin = 0;
  while (begin < text.size()) {
    const std::size_t nl = text.find('\n', begin);
    if (nl == std::string::npos) {
      tokens.push_back(text.substr(begin));
      break;
    }
    tokens.push_back(text.substr(begin, nl - begin));
    begin = nl + 1;
  }
  return Vocab(std::move(tokens));
}

// ---------------------------------------------------------------------------
// Labels

LabelTable::LabelTable(std::vector<LabelRow> rows) : rows_(std::move(rows)) {
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& r : rows_) {
    if (!seen.emplace(r.image_id, r.criterion).second) {
      throw ValidationError("duplicate label for (image_id='" + r.image_id + "', criterion='" + r.criterion + "')");
    }
  }
}

std::vector<std::string> LabelTable::criteria() const {
  std::set<std::string> names;
  for (const auto& r : rows_) names.insert(r.criterion);
  return {names.begin(), names.end()};
}

std::map<std::string, std::string> LabelTable::labels_for(const std::string& criterion) const {
  std::map<std::string, std::string> out;
  for (const auto& r : rows_) {
    if (r.criterion == criterion) out[r.image_id] = r.label;
  }
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool in_quotes = false;
  bool was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      if (!cur.empty() || was_quoted) {
        throw ValidationError("malformed CSV at line " + std::to_string(line_no) + ": stray quote");
      }
      in_quotes = was_quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
      was_quoted = false;
    } else {
      if (was_quoted) {
        throw ValidationError("malformed CSV at line " + std::to_string(line_no) + ": text after closing quote");
      }
      cur += c;
    }
  }
  if (in_quotes) throw ValidationError("malformed CSV at line " + std::to_string(line_no) + ": unterminated quote");
  fields.push_back(std::move(cur));
  return fields;
}

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

void write_labels(const LabelTable& table, const fs::path& path) {
  std::string text = "image_id,criterion,label\n";
  for (const auto& r : table.rows()) {
    text += csv_escape(r.image_id) + "," + csv_escape(r.criterion) + "," + csv_escape(r.label) + "\n";
  }
  write_text(path, text);
}

LabelTable read_labels(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  std::size_t line_no = 0;
  std::vector<LabelRow> rows;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_csv_line(line, line_no);
    if (!header_seen) {
      if (fields != std::vector<std::string>{"image_id", "criterion", "label"}) {
        throw ValidationError(quoted(path) + " line " + std::to_string(line_no) +
                              ": expected header 'image_id,criterion,label'");
      }
      header_seen = true;
      continue;
    }
    if (fields.size() != 3) {
      throw ValidationError(quoted(path) + " line " + std::to_string(line_no) + ": expected 3 fields, found " +
                            std::to_string(fields.size()));
    }
    rows.push_back({std::move(fields[0]), std::move(fields[1]), std::move(fields[2])});
  }
  if (!header_seen) throw ValidationError(quoted(path) + ": empty labels file");
  try {
    return LabelTable(std::move(rows));
  } catch (const ValidationError& e) {
    throw ValidationError(quoted(path) + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Embedding sets

void validate(const EmbeddingSet& s) {
  if (s.n <= 0 || s.vocab_size <= 0) throw ValidationError("embedding set dimensions must be positive");
  if (static_cast<std::int64_t>(s.image_ids.size()) != s.n) {
    throw ValidationError("embedding set has " + std::to_string(s.image_ids.size()) + " image ids for n=" +
                          std::to_string(s.n));
  }
  if (s.matrix.size() != static_cast<std::size_t>(s.n * s.vocab_size)) {
    throw ValidationError("embedding matrix holds " + std::to_string(s.matrix.size()) + " values, expected " +
                          std::to_string(s.n * s.vocab_size));
  }
  require_finite(s.matrix, "embedding set");
  if (!s.normalized) return;
  for (std::int64_t i = 0; i < s.n; ++i) {
    double sum = 0.0;
    for (float v : s.row(i)) {
      if (v < 0.0f || v > 1.0f) {
        throw ValidationError("normalized embedding row " + std::to_string(i) + " has an entry outside [0,1]");
      }
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-4) {
      throw ValidationError("normalized embedding row " + std::to_string(i) + " sums to " + std::to_string(sum));
    }
  }
}

void write_embeddings(const EmbeddingSet& set, const fs::path& dir) {
  validate(set);
  ensure_dir(dir);
  json m;
  m["layout"] = kEmbeddingLayout;
  m["n"] = set.n;
  m["vocab_size"] = set.vocab_size;
  m["image_ids"] = set.image_ids;
  m["normalized"] = set.normalized;
  m["source"] = {{"feature", set.source.feature}, {"layer", set.source.layer}, {"position", set.source.position}};
  const fs::path manifest = dir / "manifest.json";
  write_text(manifest, dump_json(m, manifest));
  write_f32_file(dir / "embeds.bin", set.matrix);
}

EmbeddingSet read_embeddings(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.json";
  const json m = parse_json_file(manifest);
  if (!m.is_object()) throw FormatError(quoted(manifest) + ": top level must be an object");
  const std::string layout = require_string(m, "layout", manifest);
  if (layout != kEmbeddingLayout) {
    throw FormatError(quoted(manifest) + ": unknown layout '" + layout + "' (expected '" + kEmbeddingLayout + "')");
  }
  EmbeddingSet s;
  s.n = require_int(m, "n", manifest);
  s.vocab_size = require_int(m, "vocab_size", manifest);
  if (s.n <= 0 || s.vocab_size <= 0) throw ValidationError(quoted(manifest) + ": n and vocab_size must be positive");
  if (!m.contains("normalized") || !m["normalized"].is_boolean()) {
    throw FormatError(quoted(manifest) + ": missing boolean field 'normalized'");
  }
  s.normalized = m["normalized"].get<bool>();
  if (!m.contains("image_ids") || !m["image_ids"].is_array()) {
    throw FormatError(quoted(manifest) + ": missing array field 'image_ids'");
  }
  for (const auto& id : m["image_ids"]) {
    if (!id.is_string()) throw FormatError(quoted(manifest) + ": image_ids must be strings");
    s.image_ids.push_back(id.get<std::string>());
  }
  if (!m.contains("source") || !m["source"].is_object()) {
    throw FormatError(quoted(manifest) + ": missing object field 'source'");
  }
  s.source.feature = require_string(m["source"], "feature", manifest);
  s.source.layer = require_int(m["source"], "layer", manifest);
  s.source.position = require_int(m["source"], "position", manifest);
  s.matrix = read_f32_file(dir / "embeds.bin", static_cast<std::size_t>(s.n * s.vocab_size));
  try {
    validate(s);
  } catch (const ValidationError& e) {
    throw ValidationError(quoted(manifest) + ": " + e.what());
  }
  return s;
}

}  // namespace esmc
