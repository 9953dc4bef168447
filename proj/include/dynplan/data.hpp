#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dynplan/backbone.hpp"

namespace dynplan {

enum class TaskKind { classification, regression, pair_classification };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& text);

// Whitespace vocabulary with ids 0..3 reserved for [PAD] [UNK] [CLS] [SEP].
class Vocab {
 public:
  Vocab();

  std::size_t add(const std::string& token);
  std::size_t id_of(const std::string& token) const;  // kUnkId when absent
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  const std::string& token(std::size_t id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static Vocab from_tokens(const std::vector<std::string>& tokens);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

std::vector<std::string> split_whitespace(const std::string& text);

// [CLS] a... ([SEP] b...)? truncated to max_seq_len; b-side tokens get segment 1.
TokenSequence encode(const Vocab& vocab, const std::string& text_a, const std::optional<std::string>& text_b,
                     std::size_t max_seq_len);
std::vector<std::string> decode(const Vocab& vocab, const TokenSequence& seq);

struct Example {
  std::string text_a;
  std::optional<std::string> text_b;
  double label = 0.0;  // class index, or target value for regression
  std::string difficulty;
  TokenSequence tokens;

  std::size_t class_label() const { return static_cast<std::size_t>(label); }
};

struct DatasetSpec {
  std::string name;
  TaskKind task_kind = TaskKind::classification;
  std::vector<Example> examples;
  Vocab vocab;
  std::vector<std::string> label_names;  // classification only; index = class id

  std::size_t num_classes() const { return task_kind == TaskKind::regression ? 1 : label_names.size(); }
  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
};

struct LoadOptions {
  TaskKind task_kind = TaskKind::classification;
  std::size_t max_seq_len = 16;
  // When set (evaluation splits), encoding reuses these instead of building
  // them from the file; labels outside label_names are rejected.
  std::optional<Vocab> vocab;
  std::optional<std::vector<std::string>> label_names;
};

// JSONL: {"text": ..., "label": ...} or {"text_a": ..., "text_b": ..., "label": ...},
// optional "difficulty". Errors name the line number.
DatasetSpec load_dataset(const std::string& path, const LoadOptions& options);
DatasetSpec parse_dataset(std::istream& in, const std::string& name, const LoadOptions& options);

void write_dataset(const DatasetSpec& data, const std::string& path);

enum class SyntheticKind { easy_hard_mix, keyword_count, pair_overlap };
SyntheticKind parse_synthetic_kind(const std::string& text);
std::string to_string(SyntheticKind kind);

// Raw text + labels; encode with encode_dataset once a vocabulary exists.
DatasetSpec gen_synthetic(SyntheticKind kind, std::size_t size, std::uint64_t seed);

// Builds the vocabulary from `data` (when `vocab` is empty) and encodes every example.
void encode_dataset(DatasetSpec& data, std::size_t max_seq_len, const Vocab* vocab = nullptr);

// Marker tokens of the easy-hard-mix task.
inline constexpr const char* kMarkerToken = "mark";
inline constexpr const char* kAntiMarkerToken = "anti";

}  // namespace dynplan
