#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <nlohmann/json.hpp>

#include "rvisa/error.hpp"
#include "rvisa/hashing.hpp"
#include "rvisa/polarity.hpp"

namespace rvisa {

enum class Split { train, validation, test };

constexpr std::string_view to_string(Split s) noexcept {
  switch (s) {
    case Split::train:
      return "train";
    case Split::validation:
      return "validation";
    case Split::test:
      return "test";
  }
  return "train";
}

inline std::optional<Split> parse_split(std::string_view s) noexcept {
  for (auto v : {Split::train, Split::validation, Split::test}) {
    if (s == to_string(v)) return v;
  }
  return std::nullopt;
}

enum class DatasetName { restaurant, laptop, custom };

constexpr std::string_view to_string(DatasetName n) noexcept {
  switch (n) {
    case DatasetName::restaurant:
      return "restaurant";
    case DatasetName::laptop:
      return "laptop";
    case DatasetName::custom:
      return "custom";
  }
  return "custom";
}

inline std::optional<DatasetName> parse_dataset_name(std::string_view s) noexcept {
  for (auto v : {DatasetName::restaurant, DatasetName::laptop, DatasetName::custom}) {
    if (s == to_string(v)) return v;
  }
  return std::nullopt;
}

/// One labeled aspect-level instance.
struct Example {
  std::string id;
  std::string sentence;
  std::string aspect_term;
  Polarity polarity = Polarity::neutral;
  bool implicit = false;
  Split split = Split::train;

  bool operator==(const Example&) const = default;
};

/// Throws ValidationError when the aspect term is not a verbatim substring
/// of the sentence or the id is empty.
inline void validate(const Example& e) {
  if (e.id.empty()) throw ValidationError(e.id, "empty id");
  if (e.aspect_term.empty()) throw ValidationError(e.id, "empty aspect_term");
  if (e.sentence.find(e.aspect_term) == std::string::npos) {
    throw ValidationError(e.id, "aspect_term '" + e.aspect_term + "' does not occur in sentence");
  }
}

/// Ordered, validated collection of examples. Immutable after construction.
class Dataset {
 public:
  Dataset() = default;
  Dataset(DatasetName name, std::vector<Example> examples)
      : name_(name), examples_(std::move(examples)) {
    std::set<std::string_view> seen;
    for (const auto& e : examples_) {
      validate(e);
      if (!seen.insert(e.id).second) throw ValidationError(e.id, "duplicate id");
    }
  }

  DatasetName name() const noexcept { return name_; }
  const std::vector<Example>& examples() const noexcept { return examples_; }
  std::size_t size() const noexcept { return examples_.size(); }
  bool empty() const noexcept { return examples_.empty(); }

  const Example* find(std::string_view id) const {
    auto it = std::find_if(examples_.begin(), examples_.end(),
                           [&](const Example& e) { return e.id == id; });
    return it == examples_.end() ? nullptr : &*it;
  }

 private:
  DatasetName name_ = DatasetName::custom;
  std::vector<Example> examples_;
};

// ---------------------------------------------------------------------------
// Canonical JSONL

inline nlohmann::ordered_json to_json(const Example& e) {
  nlohmann::ordered_json j;
  j["id"] = e.id;
  j["sentence"] = e.sentence;
  j["aspect_term"] = e.aspect_term;
  j["polarity"] = to_string(e.polarity);
  j["implicit"] = e.implicit;
  j["split"] = to_string(e.split);
  return j;
}

namespace detail {

inline const nlohmann::json& require_field(const nlohmann::json& j, const char* key,
                                           std::size_t line) {
  auto it = j.find(key);
  if (it == j.end()) throw ParseError(line, std::string("missing field '") + key + "'");
  return *it;
}

inline std::string require_string(const nlohmann::json& j, const char* key, std::size_t line) {
  const auto& v = require_field(j, key, line);
  if (!v.is_string()) throw ParseError(line, std::string("field '") + key + "' is not a string");
  return v.get<std::string>();
}

}  // namespace detail

/// Parses one canonical line. `line` is 1-based and only used for messages.
inline Example example_from_json(const nlohmann::json& j, std::size_t line) {
  if (!j.is_object()) throw ParseError(line, "expected a JSON object");
  Example e;
  e.id = detail::require_string(j, "id", line);
  e.sentence = detail::require_string(j, "sentence", line);
  e.aspect_term = detail::require_string(j, "aspect_term", line);
  const auto pol = detail::require_string(j, "polarity", line);
  const auto& imp = detail::require_field(j, "implicit", line);
  if (!imp.is_boolean()) throw ParseError(line, "field 'implicit' is not a boolean");
  e.implicit = imp.get<bool>();
  const auto split = detail::require_string(j, "split", line);

  auto p = parse_polarity(pol);
  if (!p) throw ValidationError(e.id, "polarity '" + pol + "' is not one of positive/negative/neutral");
  e.polarity = *p;
  auto s = parse_split(split);
  if (!s) throw ValidationError(e.id, "split '" + split + "' is not one of train/validation/test");
  e.split = *s;
  return e;
}

inline Dataset parse_canonical(std::istream& in, DatasetName name = DatasetName::custom) {
  std::vector<Example> examples;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& ex) {
      throw ParseError(lineno, ex.what());
    }
    examples.push_back(example_from_json(j, lineno));
  }
  return Dataset(name, std::move(examples));
}

inline Dataset load_canonical(const std::filesystem::path& path,
                              DatasetName name = DatasetName::custom) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  return parse_canonical(in, name);
}

inline std::string to_canonical_string(const Dataset& d) {
  std::string out;
  for (const auto& e : d.examples()) {
    out += to_json(e).dump();
    out += '\n';
  }
  return out;
}

inline void write_canonical(const Dataset& d, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << to_canonical_string(d);
}

inline std::string dataset_hash(const Dataset& d) { return sha256_hex(to_canonical_string(d)); }

// ---------------------------------------------------------------------------
// SemEval-2014 XML ingestion

/// Implicit flags keyed either by canonical id or by (sentence, aspect term).
struct ImplicitTags {
  std::map<std::string, bool> by_id;
  std::map<std::pair<std::string, std::string>, bool> by_key;
};

inline ImplicitTags parse_implicit_tags(std::istream& in) {
  ImplicitTags tags;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& ex) {
      throw ParseError(lineno, ex.what());
    }
    if (!j.is_object()) throw ParseError(lineno, "expected a JSON object");
    bool flag = true;
    if (auto it = j.find("implicit"); it != j.end()) {
      if (!it->is_boolean()) throw ParseError(lineno, "field 'implicit' is not a boolean");
      flag = it->get<bool>();
    }
    if (j.contains("id")) {
      tags.by_id[detail::require_string(j, "id", lineno)] = flag;
    } else if (j.contains("sentence") && j.contains("aspect_term")) {
      tags.by_key[{detail::require_string(j, "sentence", lineno),
                   detail::require_string(j, "aspect_term", lineno)}] = flag;
    } else {
      throw ParseError(lineno, "tag needs 'id' or 'sentence'+'aspect_term'");
    }
  }
  return tags;
}

inline ImplicitTags load_implicit_tags(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  return parse_implicit_tags(in);
}

struct SemevalSource {
  std::filesystem::path path;
  Split split = Split::train;
};

struct ConversionResult {
  Dataset dataset;
  std::size_t dropped_conflict = 0;
  // Aspect terms that could not satisfy Example invariants (term not in sentence, empty, ...).
  std::size_t dropped_invalid = 0;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

// Appends examples from one SemEval XML document; ids are "{sentence id}#{k}" with k the
// position of the aspectTerm inside its sentence.
inline void read_semeval(std::istream& xml, Split split, const std::string& source,
                         std::vector<Example>& out, ConversionResult& result) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_xml(xml, tree, pt::xml_parser::no_comments);
  } catch (const pt::xml_parser_error& ex) {
    throw IngestionError(source + ": " + ex.what());
  }
  auto root = tree.get_child_optional("sentences");
  if (!root) throw IngestionError(source + ": root element <sentences> not found");

  for (const auto& [tag, node] : *root) {
    if (tag == "<xmlattr>") continue;
    if (tag != "sentence") throw IngestionError(source + ": unexpected element <" + tag + ">");
    auto sid = node.get_optional<std::string>("<xmlattr>.id");
    if (!sid) throw IngestionError(source + ": <sentence> without id attribute");
    auto text = node.get_optional<std::string>("text");
    if (!text) throw IngestionError(source + ": sentence " + *sid + " has no <text>");
    auto terms = node.get_child_optional("aspectTerms");
    if (!terms) continue;
    std::size_t k = 0;
    for (const auto& [ttag, tnode] : *terms) {
      if (ttag == "<xmlattr>") continue;
      if (ttag != "aspectTerm") {
        throw IngestionError(source + ": sentence " + *sid + " has unexpected <" + ttag + ">");
      }
      const std::string id = *sid + "#" + std::to_string(k++);
      auto term = tnode.get_optional<std::string>("<xmlattr>.term");
      auto pol = tnode.get_optional<std::string>("<xmlattr>.polarity");
      if (!term || !pol) {
        throw IngestionError(source + ": aspectTerm " + id + " lacks term or polarity");
      }
      if (*pol == "conflict") {
        ++result.dropped_conflict;
        continue;
      }
      auto p = parse_polarity(*pol);
      if (!p) throw IngestionError(source + ": aspectTerm " + id + " has polarity '" + *pol + "'");
      Example e{id, *text, trim(*term), *p, false, split};
      try {
        validate(e);
      } catch (const ValidationError& ex) {
        ++result.dropped_invalid;
        result.warnings.push_back(source + ": dropped " + ex.what());
        continue;
      }
      out.push_back(std::move(e));
    }
  }
}

inline void apply_implicit_tags(std::vector<Example>& examples, const ImplicitTags& tags,
                                std::vector<std::string>& warnings) {
  std::set<std::string> used_ids;
  std::set<std::pair<std::string, std::string>> used_keys;
  for (auto& e : examples) {
    if (auto it = tags.by_id.find(e.id); it != tags.by_id.end()) {
      e.implicit = it->second;
      used_ids.insert(e.id);
    } else if (auto kt = tags.by_key.find({e.sentence, e.aspect_term}); kt != tags.by_key.end()) {
      e.implicit = kt->second;
      used_keys.insert(kt->first);
    }
  }
  for (const auto& [id, flag] : tags.by_id) {
    if (!used_ids.count(id)) warnings.push_back("implicit tag for unknown id '" + id + "' ignored");
  }
  for (const auto& [key, flag] : tags.by_key) {
    if (!used_keys.count(key)) {
      warnings.push_back("implicit tag for unknown (sentence, term '" + key.second + "') ignored");
    }
  }
}

}  // namespace detail

/// Converts SemEval XML from an in-memory stream. Used by the file-based overloads.
inline ConversionResult convert_semeval_stream(std::istream& xml, const ImplicitTags& tags,
                                               Split split = Split::train,
                                               DatasetName name = DatasetName::custom) {
  ConversionResult result;
  std::vector<Example> examples;
  detail::read_semeval(xml, split, "<stream>", examples, result);
  detail::apply_implicit_tags(examples, tags, result.warnings);
  result.dataset = Dataset(name, std::move(examples));
  return result;
}

/// Converts several SemEval XML files (one per split) sharing a single implicit-tag sidecar.
/// An empty `implicit_tag_path` means no example is flagged implicit.
inline ConversionResult convert_semeval(const std::vector<SemevalSource>& sources,
                                        const std::filesystem::path& implicit_tag_path,
                                        DatasetName name = DatasetName::custom) {
  ConversionResult result;
  std::vector<Example> examples;
  for (const auto& src : sources) {
    std::ifstream in(src.path, std::ios::binary);
    if (!in) throw IngestionError("cannot open " + src.path.string());
    detail::read_semeval(in, src.split, src.path.string(), examples, result);
  }
  if (!implicit_tag_path.empty()) {
    detail::apply_implicit_tags(examples, load_implicit_tags(implicit_tag_path), result.warnings);
  }
  std::set<std::string> seen;
  for (const auto& e : examples) {
    if (!seen.insert(e.id).second) {
      throw IngestionError("duplicate sentence id across sources: " + e.id);
    }
  }
  result.dataset = Dataset(name, std::move(examples));
  return result;
}

inline ConversionResult convert_semeval(const std::filesystem::path& xml_path,
                                        const std::filesystem::path& implicit_tag_path,
                                        Split split = Split::train,
                                        DatasetName name = DatasetName::custom) {
  return convert_semeval(std::vector<SemevalSource>{{xml_path, split}}, implicit_tag_path, name);
}

// ---------------------------------------------------------------------------
// Splits

inline std::vector<Example> slice(const Dataset& d, Split split, bool implicit_only) {
  std::vector<Example> out;
  for (const auto& e : d.examples()) {
    if (e.split == split && (!implicit_only || e.implicit)) out.push_back(e);
  }
  return out;
}

/// When `d` has no validation examples, moves the last `fraction` of the train split
/// (ordered by id) to validation. Order of examples is preserved.
inline Dataset hold_out_validation(const Dataset& d, double fraction = 0.1) {
  if (fraction < 0.0 || fraction >= 1.0) throw ArgumentError("validation fraction must be in [0, 1)");
  const auto& ex = d.examples();
  if (std::any_of(ex.begin(), ex.end(), [](const Example& e) { return e.split == Split::validation; })) {
    return d;
  }
  std::vector<std::string> train_ids;
  for (const auto& e : ex) {
    if (e.split == Split::train) train_ids.push_back(e.id);
  }
  std::sort(train_ids.begin(), train_ids.end());
  const auto n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(train_ids.size())));
  std::set<std::string> held(train_ids.end() - static_cast<std::ptrdiff_t>(n_val), train_ids.end());
  std::vector<Example> out = ex;
  for (auto& e : out) {
    if (held.count(e.id)) e.split = Split::validation;
  }
  return Dataset(d.name(), std::move(out));
}

}  // namespace rvisa
