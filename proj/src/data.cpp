#include "dynplan/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "dynplan/random.hpp"

namespace dynplan {

using nlohmann::json;

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::classification: return "classification";
    case TaskKind::regression: return "regression";
    case TaskKind::pair_classification: return "pair-classification";
  }
  return "classification";
}

TaskKind parse_task_kind(const std::string& text) {
  if (text == "classification") return TaskKind::classification;
  if (text == "regression") return TaskKind::regression;
  if (text == "pair-classification") return TaskKind::pair_classification;
  throw std::invalid_argument("unknown task kind '" + text + "'");
}

Vocab::Vocab() {
  for (const char* t : {"[PAD]", "[UNK]", "[CLS]", "[SEP]"}) add(t);
}

std::size_t Vocab::add(const std::string& token) {
  auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  const std::size_t id = tokens_.size();
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

std::size_t Vocab::id_of(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(std::size_t id) const {
  if (id >= tokens_.size()) throw std::out_of_range("vocab: id " + std::to_string(id) + " out of range");
  return tokens_[id];
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  if (tokens.size() < kNumReserved) throw std::invalid_argument("vocab: missing reserved tokens");
  Vocab v;
  for (std::size_t i = 0; i < kNumReserved; ++i)
    if (tokens[i] != v.tokens_[i]) throw std::invalid_argument("vocab: reserved token mismatch at id " + std::to_string(i));
  for (std::size_t i = kNumReserved; i < tokens.size(); ++i) {
    if (v.contains(tokens[i])) throw std::invalid_argument("vocab: duplicate token '" + tokens[i] + "'");
    v.add(tokens[i]);
  }
  return v;
}

std::vector<std::string> split_whitespace(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> out;
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

TokenSequence encode(const Vocab& vocab, const std::string& text_a, const std::optional<std::string>& text_b,
                     std::size_t max_seq_len) {
  TokenSequence seq;
  auto push = [&](std::size_t id, std::size_t segment) {
    if (seq.size() >= max_seq_len) return;
    seq.token_ids.push_back(id);
    seq.segment_ids.push_back(segment);
  };
  push(kClsId, 0);
  for (const auto& t : split_whitespace(text_a)) push(vocab.id_of(t), 0);
  if (text_b) {
    push(kSepId, 0);
    for (const auto& t : split_whitespace(*text_b)) push(vocab.id_of(t), 1);
  }
  return seq;
}

std::vector<std::string> decode(const Vocab& vocab, const TokenSequence& seq) {
  std::vector<std::string> out;
  out.reserve(seq.size());
  for (auto id : seq.token_ids) out.push_back(vocab.token(id));
  return out;
}

namespace {

std::string label_name(const json& label, std::size_t line) {
  if (label.is_string()) return label.get<std::string>();
  if (label.is_number_integer() || label.is_number_unsigned()) {
    const auto v = label.get<long long>();
    if (v < 0) throw std::invalid_argument("line " + std::to_string(line) + ": negative class label");
    return std::to_string(v);
  }
  if (label.is_boolean()) return label.get<bool>() ? "1" : "0";
  throw std::invalid_argument("line " + std::to_string(line) + ": class label must be an integer or string");
}

bool all_integers(const std::vector<std::string>& names) {
  return std::all_of(names.begin(), names.end(), [](const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
  });
}

}  // namespace

DatasetSpec parse_dataset(std::istream& in, const std::string& name, const LoadOptions& options) {
  DatasetSpec data;
  data.name = name;
  data.task_kind = options.task_kind;

  std::vector<std::string> raw_labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::invalid_argument("line " + std::to_string(line_no) + ": malformed JSON");
    }
    if (!obj.is_object()) throw std::invalid_argument("line " + std::to_string(line_no) + ": expected a JSON object");
    if (!obj.contains("label")) throw std::invalid_argument("line " + std::to_string(line_no) + ": missing label");

    Example ex;
    auto text_field = [&](const char* key) -> std::optional<std::string> {
      if (!obj.contains(key)) return std::nullopt;
      if (!obj[key].is_string())
        throw std::invalid_argument("line " + std::to_string(line_no) + ": field '" + key + "' must be a string");
      return obj[key].get<std::string>();
    };
    if (auto t = text_field("text")) {
      ex.text_a = *t;
    } else if (auto a = text_field("text_a")) {
      ex.text_a = *a;
      ex.text_b = text_field("text_b");
      if (!ex.text_b) throw std::invalid_argument("line " + std::to_string(line_no) + ": text_a without text_b");
    } else {
      throw std::invalid_argument("line " + std::to_string(line_no) + ": missing text");
    }
    if (auto d = text_field("difficulty")) ex.difficulty = *d;

    if (options.task_kind == TaskKind::regression) {
      if (!obj["label"].is_number())
        throw std::invalid_argument("line " + std::to_string(line_no) + ": regression label must be a number");
      ex.label = obj["label"].get<double>();
      raw_labels.emplace_back();
    } else {
      raw_labels.push_back(label_name(obj["label"], line_no));
    }
    data.examples.push_back(std::move(ex));
  }

  if (options.task_kind != TaskKind::regression) {
    if (options.label_names) {
      data.label_names = *options.label_names;
    } else {
      std::set<std::string> unique(raw_labels.begin(), raw_labels.end());
      std::vector<std::string> names(unique.begin(), unique.end());
      if (all_integers(names)) {
        std::size_t max_id = 0;
        for (const auto& n : names) max_id = std::max<std::size_t>(max_id, std::stoull(n));
        names.clear();
        for (std::size_t i = 0; i <= max_id; ++i) names.push_back(std::to_string(i));
      }
      data.label_names = names;
    }
    for (std::size_t i = 0; i < data.examples.size(); ++i) {
      auto it = std::find(data.label_names.begin(), data.label_names.end(), raw_labels[i]);
      if (it == data.label_names.end())
        throw std::invalid_argument("example " + std::to_string(i + 1) + ": unknown label '" + raw_labels[i] + "'");
      data.examples[i].label = static_cast<double>(it - data.label_names.begin());
    }
  }

  encode_dataset(data, options.max_seq_len, options.vocab ? &*options.vocab : nullptr);
  return data;
}

DatasetSpec load_dataset(const std::string& path, const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset '" + path + "'");
  return parse_dataset(in, path, options);
}

void encode_dataset(DatasetSpec& data, std::size_t max_seq_len, const Vocab* vocab) {
  if (vocab != nullptr) {
    data.vocab = *vocab;
  } else {
    data.vocab = Vocab();
    for (const auto& ex : data.examples) {
      for (const auto& t : split_whitespace(ex.text_a)) data.vocab.add(t);
      if (ex.text_b)
        for (const auto& t : split_whitespace(*ex.text_b)) data.vocab.add(t);
    }
  }
  for (auto& ex : data.examples) ex.tokens = encode(data.vocab, ex.text_a, ex.text_b, max_seq_len);
}

void write_dataset(const DatasetSpec& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset '" + path + "'");
  for (const auto& ex : data.examples) {
    json obj;
    if (ex.text_b) {
      obj["text_a"] = ex.text_a;
      obj["text_b"] = *ex.text_b;
    } else {
      obj["text"] = ex.text_a;
    }
    if (data.task_kind == TaskKind::regression) {
      obj["label"] = ex.label;
    } else {
      const std::string& name = data.label_names.at(ex.class_label());
      if (all_integers({name}))
        obj["label"] = std::stoll(name);
      else
        obj["label"] = name;
    }
    if (!ex.difficulty.empty()) obj["difficulty"] = ex.difficulty;
    out << obj.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

SyntheticKind parse_synthetic_kind(const std::string& text) {
  if (text == "easy-hard-mix") return SyntheticKind::easy_hard_mix;
  if (text == "keyword-count") return SyntheticKind::keyword_count;
  if (text == "pair-overlap") return SyntheticKind::pair_overlap;
  throw std::invalid_argument("unknown synthetic kind '" + text + "'");
}

std::string to_string(SyntheticKind kind) {
  switch (kind) {
    case SyntheticKind::easy_hard_mix: return "easy-hard-mix";
    case SyntheticKind::keyword_count: return "keyword-count";
    case SyntheticKind::pair_overlap: return "pair-overlap";
  }
  return "easy-hard-mix";
}

namespace {

constexpr std::size_t kFillerCount = 12;
constexpr std::size_t kMinFiller = 4;
constexpr std::size_t kMaxFiller = 8;

std::vector<std::string> fillers(Rng& rng, std::size_t pool, std::size_t min_len, std::size_t max_len) {
  const std::size_t n = min_len + rng.below(max_len - min_len + 1);
  std::vector<std::string> out(n);
  for (auto& t : out) t = "w" + std::to_string(rng.below(pool));
  return out;
}

void insert_at_random(std::vector<std::string>& tokens, const std::string& tok, Rng& rng) {
  const std::size_t pos = rng.below(tokens.size() + 1);
  tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(pos), tok);
}

std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

Example easy_hard_example(bool hard, bool positive, Rng& rng) {
  Example ex;
  ex.label = positive ? 1.0 : 0.0;
  ex.difficulty = hard ? "hard" : "easy";
  auto tokens = fillers(rng, kFillerCount, kMinFiller, kMaxFiller);
  if (!hard) {
    // Label is the presence of the marker.
    if (positive) insert_at_random(tokens, kMarkerToken, rng);
  } else {
    // Both markers present; label is whether the marker comes first.
    const std::size_t n = tokens.size() + 2;
    std::size_t i = rng.below(n);
    std::size_t j = rng.below(n - 1);
    if (j >= i) ++j;
    const std::size_t first = std::min(i, j);
    const std::size_t second = std::max(i, j);
    std::vector<std::string> out;
    std::size_t src = 0;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == first)
        out.push_back(positive ? kMarkerToken : kAntiMarkerToken);
      else if (p == second)
        out.push_back(positive ? kAntiMarkerToken : kMarkerToken);
      else
        out.push_back(tokens[src++]);
    }
    tokens = std::move(out);
  }
  ex.text_a = join(tokens);
  return ex;
}

Example keyword_count_example(bool positive, Rng& rng) {
  Example ex;
  ex.label = positive ? 1.0 : 0.0;
  const std::size_t count = positive ? 2 + rng.below(2) : rng.below(2);
  ex.difficulty = (count == 0 || count == 3) ? "easy" : "hard";
  auto tokens = fillers(rng, kFillerCount, kMinFiller, kMaxFiller);
  for (std::size_t c = 0; c < count; ++c) insert_at_random(tokens, "key", rng);
  ex.text_a = join(tokens);
  return ex;
}

Example pair_overlap_example(bool positive, Rng& rng) {
  constexpr std::size_t pool = 24;
  Example ex;
  ex.label = positive ? 1.0 : 0.0;
  std::vector<std::size_t> ids(pool);
  for (std::size_t i = 0; i < pool; ++i) ids[i] = i;
  rng.shuffle(ids);
  const std::size_t len_a = 3 + rng.below(3);
  const std::size_t len_b = 3 + rng.below(3);
  std::vector<std::string> a, b;
  for (std::size_t i = 0; i < len_a; ++i) a.push_back("w" + std::to_string(ids[i]));
  for (std::size_t i = 0; i < len_b; ++i) b.push_back("w" + std::to_string(ids[len_a + i]));
  if (positive) b[rng.below(len_b)] = a[rng.below(len_a)];
  ex.difficulty = positive ? "hard" : "easy";
  ex.text_a = join(a);
  ex.text_b = join(b);
  return ex;
}

}  // namespace

DatasetSpec gen_synthetic(SyntheticKind kind, std::size_t size, std::uint64_t seed) {
  if (size == 0) throw std::invalid_argument("gen_synthetic: size must be positive");
  Rng rng(seed);
  DatasetSpec data;
  data.name = to_string(kind);
  data.task_kind = kind == SyntheticKind::pair_overlap ? TaskKind::pair_classification : TaskKind::classification;
  data.label_names = {"0", "1"};
  data.examples.reserve(size);
  // Labels and difficulty cycle deterministically so both are balanced, then
  // the order is shuffled.
  for (std::size_t i = 0; i < size; ++i) {
    const bool hard = i % 2 == 1;
    const bool positive = (i / 2) % 2 == 1;
    switch (kind) {
      case SyntheticKind::easy_hard_mix: data.examples.push_back(easy_hard_example(hard, positive, rng)); break;
      case SyntheticKind::keyword_count: data.examples.push_back(keyword_count_example(positive, rng)); break;
      case SyntheticKind::pair_overlap: data.examples.push_back(pair_overlap_example(positive, rng)); break;
    }
  }
  rng.shuffle(data.examples);
  return data;
}

}  // namespace dynplan
