#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "rvisa/error.hpp"
#include "rvisa/taskset.hpp"
#include "rvisa/training.hpp"

namespace rvisa {

// Whitespace split; ASCII punctuation becomes its own token. Case is kept.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (u < 0x80 && std::isspace(u)) {
      flush();
    } else if (u < 0x80 && std::ispunct(u)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur += ch;
    }
  }
  flush();
  return out;
}

class Vocabulary {
 public:
  static constexpr int kUnk = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;

  Vocabulary() : tokens_{"<unk>", "<bos>", "<eos>"} { reindex(); }

  static Vocabulary build(const TaskSet& ts) {
    Vocabulary v;
    for (const auto& inst : ts.instances) {
      for (const auto* text : {&inst.input_text, &inst.target_text}) {
        for (auto& tok : tokenize(*text)) v.add(std::move(tok));
      }
    }
    return v;
  }

  static Vocabulary from_tokens(std::vector<std::string> tokens) {
    Vocabulary v;
    v.tokens_ = std::move(tokens);
    if (v.tokens_.size() < 3 || v.tokens_[0] != "<unk>" || v.tokens_[1] != "<bos>" || v.tokens_[2] != "<eos>") {
      throw Error("vocabulary must start with <unk>, <bos>, <eos>");
    }
    v.reindex();
    return v;
  }

  int id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnk : it->second;
  }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int size() const noexcept { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  std::vector<int> encode(std::string_view text, int max_tokens) const {
    std::vector<int> ids;
    for (const auto& tok : tokenize(text)) {
      if (static_cast<int>(ids.size()) == max_tokens) break;
      ids.push_back(id(tok));
    }
    return ids;
  }

 private:
  void add(std::string tok) {
    if (index_.count(tok)) return;
    index_.emplace(tok, static_cast<int>(tokens_.size()));
    tokens_.push_back(std::move(tok));
  }
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<int>(i));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct TinySeq2SeqConfig {
  int embedding_dim = 32;
  int hidden_dim = 64;
  std::uint64_t seed = 13;
  int max_input_tokens = 128;
  int max_target_tokens = 96;
  LossNormalization normalization = LossNormalization::token_mean;
  double grad_clip = 5.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Small encoder-decoder trained from scratch, sized for desk-scale runs.
///
/// Encoder: mean of input token embeddings concatenated with the first input
/// token's embedding (the task prefix), through a tanh layer.
/// Decoder: at each position a tanh layer over [encoding; previous token
/// embedding] feeds a softmax over the vocabulary. Trained with Adam on
/// teacher-forced cross-entropy; decoding is greedy.
class TinySeq2Seq final : public Seq2SeqBackend {
 public:
  explicit TinySeq2Seq(TinySeq2SeqConfig cfg = {}) : cfg_(cfg) {}

  std::string id() const override { return "tiny_seq2seq"; }
  const TinySeq2SeqConfig& config() const noexcept { return cfg_; }
  bool initialized() const noexcept { return !params_.empty(); }
  const Vocabulary& vocabulary() const noexcept { return vocab_; }

  void prepare(const TaskSet& taskset) override {
    if (initialized()) return;
    vocab_ = Vocabulary::build(taskset);
    init_params();
  }

  double accumulate(std::span<const TrainingInstance* const> batch, double weight) override {
    require_initialized();
    if (batch.empty()) return 0.0;
    std::vector<std::vector<int>> inputs;
    std::vector<std::vector<int>> targets;
    std::size_t total_tokens = 0;
    for (const auto* inst : batch) {
      inputs.push_back(encode_input(inst->input_text));
      auto tgt = vocab_.encode(inst->target_text, cfg_.max_target_tokens);
      tgt.push_back(Vocabulary::kEos);
      total_tokens += tgt.size();
      targets.push_back(std::move(tgt));
    }
    double loss = 0.0;
    const auto n_seq = static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const double scale = cfg_.normalization == LossNormalization::token_mean
                               ? 1.0 / static_cast<double>(total_tokens)
                               : 1.0 / (n_seq * static_cast<double>(targets[i].size()));
      loss += scale * sequence_pass(inputs[i], targets[i], weight > 0.0 ? weight * scale : 0.0);
    }
    return loss;
  }

  void apply_update(double learning_rate) override {
    require_initialized();
    double sq = 0.0;
    for (const auto& p : params_) sq += p.grad.squaredNorm();
    const double norm = std::sqrt(sq);
    const double clip = norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;
    ++adam_step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(adam_step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(adam_step_));
    for (auto& p : params_) {
      p.grad *= clip;
      p.m = cfg_.beta1 * p.m + (1.0 - cfg_.beta1) * p.grad;
      p.v = cfg_.beta2 * p.v + (1.0 - cfg_.beta2) * p.grad.cwiseProduct(p.grad);
      p.value.array() -= learning_rate * (p.m.array() / bc1) /
                         ((p.v.array() / bc2).sqrt() + cfg_.epsilon);
      p.grad.setZero();
    }
  }

  std::string generate(std::string_view input, int max_new_tokens) override {
    require_initialized();
    const auto in = encode_input(input);
    Eigen::VectorXd features;
    const Eigen::VectorXd enc = encode(in, features);
    const Eigen::VectorXd ctx = Wc() * enc + bd();
    std::string out;
    int prev = Vocabulary::kBos;
    for (int t = 0; t < max_new_tokens; ++t) {
      const Eigen::VectorXd z = (ctx + Wp() * E().row(prev).transpose()).array().tanh().matrix();
      Eigen::Index best = 0;
      (O() * z + bo()).maxCoeff(&best);
      const int tok = static_cast<int>(best);
      if (tok == Vocabulary::kEos) break;
      if (!out.empty()) out += ' ';
      out += vocab_.token(tok);
      prev = tok;
    }
    return out;
  }

  void save(const std::filesystem::path& dir) const override {
    require_initialized();
    std::filesystem::create_directories(dir);
    {
      nlohmann::ordered_json j;
      j["backend"] = id();
      j["embedding_dim"] = cfg_.embedding_dim;
      j["hidden_dim"] = cfg_.hidden_dim;
      j["seed"] = cfg_.seed;
      j["max_input_tokens"] = cfg_.max_input_tokens;
      j["max_target_tokens"] = cfg_.max_target_tokens;
      j["normalization"] = to_string(cfg_.normalization);
      j["vocab_size"] = vocab_.size();
      j["parameter_count"] = parameter_count();
      std::ofstream out(dir / "config.json", std::ios::binary | std::ios::trunc);
      out << j.dump(2) << '\n';
    }
    {
      std::ofstream out(dir / "vocab.txt", std::ios::binary | std::ios::trunc);
      for (const auto& tok : vocab_.tokens()) out << tok << '\n';
    }
    std::ofstream out(dir / "params.bin", std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + (dir / "params.bin").string());
    for (const auto& p : params_) {
      const std::int64_t dims[2] = {p.value.rows(), p.value.cols()};
      out.write(reinterpret_cast<const char*>(dims), sizeof dims);
      out.write(reinterpret_cast<const char*>(p.value.data()),
                static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p.value.size())));
    }
  }

  void load(const std::filesystem::path& dir) override {
    std::ifstream cfg_in(dir / "config.json", std::ios::binary);
    if (!cfg_in) throw Error("no checkpoint at " + dir.string());
    const auto j = nlohmann::json::parse(cfg_in);
    cfg_.embedding_dim = j.at("embedding_dim").get<int>();
    cfg_.hidden_dim = j.at("hidden_dim").get<int>();
    cfg_.max_input_tokens = j.at("max_input_tokens").get<int>();
    cfg_.max_target_tokens = j.at("max_target_tokens").get<int>();
    auto norm = parse_loss_normalization(j.at("normalization").get<std::string>());
    if (!norm) throw Error("checkpoint has unknown normalization");
    cfg_.normalization = *norm;

    std::ifstream vin(dir / "vocab.txt", std::ios::binary);
    std::vector<std::string> tokens;
    for (std::string line; std::getline(vin, line);) tokens.push_back(line);
    vocab_ = Vocabulary::from_tokens(std::move(tokens));
    init_params();

    std::ifstream in(dir / "params.bin", std::ios::binary);
    if (!in) throw Error("cannot open " + (dir / "params.bin").string());
    for (auto& p : params_) {
      std::int64_t dims[2] = {0, 0};
      in.read(reinterpret_cast<char*>(dims), sizeof dims);
      if (!in || dims[0] != p.value.rows() || dims[1] != p.value.cols()) {
        throw Error("checkpoint parameter shape mismatch in " + dir.string());
      }
      in.read(reinterpret_cast<char*>(p.value.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p.value.size())));
      if (!in) throw Error("truncated checkpoint " + dir.string());
    }
  }

  std::size_t parameter_count() const override {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

 private:
  struct Param {
    Eigen::MatrixXd value, grad, m, v;
  };
  enum Slot { kE, kWe, kBe, kWc, kWp, kBd, kO, kBo, kSlots };

  Eigen::MatrixXd& E() { return params_[kE].value; }
  Eigen::MatrixXd& We() { return params_[kWe].value; }
  Eigen::MatrixXd& Wc() { return params_[kWc].value; }
  Eigen::MatrixXd& Wp() { return params_[kWp].value; }
  Eigen::MatrixXd& O() { return params_[kO].value; }
  Eigen::Ref<Eigen::VectorXd> be() { return params_[kBe].value.col(0); }
  Eigen::Ref<Eigen::VectorXd> bd() { return params_[kBd].value.col(0); }
  Eigen::Ref<Eigen::VectorXd> bo() { return params_[kBo].value.col(0); }

  void require_initialized() const {
    if (params_.empty()) throw Error("tiny_seq2seq: model not prepared or loaded");
  }

  void init_params() {
    const int V = vocab_.size();
    const int d = cfg_.embedding_dim;
    const int h = cfg_.hidden_dim;
    if (d < 1 || h < 1) throw ArgumentError("tiny_seq2seq: dimensions must be >= 1");
    std::uint64_t state = cfg_.seed * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL;
    // splitmix64 keeps initialization identical across standard libraries
    auto uniform = [&state](double scale) {
      state += 0x9e3779b97f4a7c15ULL;
      std::uint64_t z = state;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      z ^= z >> 31;
      return scale * (2.0 * static_cast<double>(z >> 11) * 0x1.0p-53 - 1.0);
    };
    const std::pair<int, int> shapes[kSlots] = {{V, d}, {h, 2 * d}, {h, 1}, {h, h},
                                                {h, d}, {h, 1},     {V, h}, {V, 1}};
    params_.assign(kSlots, {});
    adam_step_ = 0;
    for (int s = 0; s < kSlots; ++s) {
      auto& p = params_[s];
      const auto [rows, cols] = shapes[s];
      p.value.resize(rows, cols);
      const bool bias = cols == 1 && s != kE;
      const double scale = bias ? 0.0 : (s == kE ? 0.1 : 1.0 / std::sqrt(static_cast<double>(cols)));
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) {
        for (Eigen::Index r = 0; r < p.value.rows(); ++r) p.value(r, c) = uniform(scale);
      }
      p.grad = Eigen::MatrixXd::Zero(rows, cols);
      p.m = Eigen::MatrixXd::Zero(rows, cols);
      p.v = Eigen::MatrixXd::Zero(rows, cols);
    }
  }

  std::vector<int> encode_input(std::string_view text) const {
    auto ids = vocab_.encode(text, cfg_.max_input_tokens);
    if (ids.empty()) ids.push_back(Vocabulary::kUnk);
    return ids;
  }

  // features = [mean embedding; first-token embedding]
  Eigen::VectorXd encode(const std::vector<int>& in, Eigen::VectorXd& features) {
    const int d = cfg_.embedding_dim;
    features = Eigen::VectorXd::Zero(2 * d);
    for (int tok : in) features.head(d) += E().row(tok).transpose();
    features.head(d) /= static_cast<double>(in.size());
    features.tail(d) = E().row(in.front()).transpose();
    return (We() * features + be()).array().tanh().matrix();
  }

  // Returns the summed negative log-likelihood of `target`; when grad_scale > 0
  // adds grad_scale * d(NLL)/d(params) to the gradient accumulators.
  double sequence_pass(const std::vector<int>& in, const std::vector<int>& target, double grad_scale) {
    const int d = cfg_.embedding_dim;
    Eigen::VectorXd features;
    const Eigen::VectorXd enc = encode(in, features);
    const Eigen::VectorXd ctx = Wc() * enc + bd();
    const bool backprop = grad_scale > 0.0;
    Eigen::VectorXd d_enc = Eigen::VectorXd::Zero(enc.size());

    double nll = 0.0;
    int prev = Vocabulary::kBos;
    for (int gold : target) {
      const Eigen::VectorXd prev_emb = E().row(prev).transpose();
      const Eigen::VectorXd z = (ctx + Wp() * prev_emb).array().tanh().matrix();
      Eigen::VectorXd logits = O() * z + bo();
      const double mx = logits.maxCoeff();
      Eigen::VectorXd probs = (logits.array() - mx).exp().matrix();
      const double denom = probs.sum();
      nll += -(logits(gold) - mx - std::log(denom));
      if (backprop) {
        probs /= denom;
        probs(gold) -= 1.0;
        probs *= grad_scale;  // dL/dlogits
        params_[kO].grad.noalias() += probs * z.transpose();
        params_[kBo].grad.col(0) += probs;
        const Eigen::VectorXd da =
            ((O().transpose() * probs).array() * (1.0 - z.array().square())).matrix();
        params_[kWc].grad.noalias() += da * enc.transpose();
        params_[kWp].grad.noalias() += da * prev_emb.transpose();
        params_[kBd].grad.col(0) += da;
        params_[kE].grad.row(prev) += (Wp().transpose() * da).transpose();
        d_enc.noalias() += Wc().transpose() * da;
      }
      prev = gold;
    }

    if (backprop) {
      const Eigen::VectorXd de = (d_enc.array() * (1.0 - enc.array().square())).matrix();
      params_[kWe].grad.noalias() += de * features.transpose();
      params_[kBe].grad.col(0) += de;
      const Eigen::VectorXd d_features = We().transpose() * de;
      const Eigen::VectorXd d_mean = d_features.head(d) / static_cast<double>(in.size());
      for (int tok : in) params_[kE].grad.row(tok) += d_mean.transpose();
      params_[kE].grad.row(in.front()) += d_features.tail(d).transpose();
    }
    return nll;
  }

  TinySeq2SeqConfig cfg_;
  Vocabulary vocab_;
  std::vector<Param> params_;
  long adam_step_ = 0;
};

}  // namespace rvisa
