#include "soe/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace soe {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluA = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluB = 0.044715;

inline double gelu(double x) {
  const double u = kGeluA * (x + kGeluB * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_deriv(double x) {
  const double x2 = x * x;
  const double u = kGeluA * (x + kGeluB * x * x2);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluA * (1.0 + 3.0 * kGeluB * x2);
}

void ln_forward(const Mat& x, const Mat& g, const Mat& b, Mat& hat, Vec& rstd, Mat& out) {
  const auto rows = x.rows();
  const auto cols = x.cols();
  hat.resize(rows, cols);
  out.resize(rows, cols);
  rstd.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    rstd(r) = rs;
    hat.row(r) = ((x.row(r).array() - mu) * rs).matrix();
    out.row(r) = hat.row(r).cwiseProduct(g.row(0)) + b.row(0);
  }
}

// d_in is assigned, d_g/d_b accumulated.
void ln_backward(const Mat& d_out, const Mat& hat, const Vec& rstd, const Mat& g, Mat& d_in,
                 Mat& d_g, Mat& d_b) {
  const auto rows = d_out.rows();
  const auto cols = d_out.cols();
  d_in.resize(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    Eigen::RowVectorXd dhat = d_out.row(r).cwiseProduct(g.row(0));
    const double m1 = dhat.mean();
    const double m2 = dhat.cwiseProduct(hat.row(r)).mean();
    d_in.row(r) = (rstd(r) * (dhat.array() - m1 - hat.row(r).array() * m2)).matrix();
  }
  d_g.row(0) += (d_out.cwiseProduct(hat)).colwise().sum();
  d_b.row(0) += d_out.colwise().sum();
}

void dropout_mask(Mat& mask, Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  mask.resize(rows, cols);
  const double scale = 1.0 / (1.0 - p);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      mask(r, c) = rng.uniform() >= p ? scale : 0.0;
    }
  }
}

struct LayerTrace {
  Mat in;                // (B*T) x C, layer input (also the cached state)
  Mat ln1_hat, ln1_out;  // over mem+cur rows
  Vec ln1_rstd;
  Mat qkv;               // over mem+cur rows; q part only valid at cur rows
  std::vector<Mat> att;  // B*H of T x (M+T)
  Mat ctx;
  Mat drop_attn;
  Mat mid;
  Mat ln2_hat, ln2_out;
  Vec ln2_rstd;
  Mat f1, f1a;
  Mat drop_ffn;
};

struct Trace {
  int batch = 0, length = 0, mem_len = 0;
  std::vector<TokenId> ids;
  Mat x0;
  Mat drop_emb;
  std::vector<LayerTrace> layers;
  Mat lnf_hat, lnf_out;
  Vec lnf_rstd;
};

}  // namespace

void ModelConfig::validate() const {
  if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || max_seq_len < 1) {
    throw std::invalid_argument("model config: all dimensions must be >= 1");
  }
  if (d_model % n_heads != 0) throw std::invalid_argument("d_model must be divisible by n_heads");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must be in [0,1)");
  if (vocab_size < 1) throw std::invalid_argument("vocab_size must be set");
  if (memory_len < 0) throw std::invalid_argument("memory_len must be >= 0");
}

std::string ModelConfig::to_json_string() const {
  nlohmann::json j{{"d_model", d_model},       {"n_layers", n_layers},
                   {"n_heads", n_heads},       {"d_ff", d_ff},
                   {"dropout", dropout},       {"vocab_size", vocab_size},
                   {"memory_len", memory_len}, {"max_seq_len", max_seq_len}};
  return j.dump();
}

ModelConfig ModelConfig::from_json_string(const std::string& s) {
  const auto j = nlohmann::json::parse(s);
  ModelConfig cfg;
  cfg.d_model = j.at("d_model");
  cfg.n_layers = j.at("n_layers");
  cfg.n_heads = j.at("n_heads");
  cfg.d_ff = j.at("d_ff");
  cfg.dropout = j.at("dropout");
  cfg.vocab_size = j.at("vocab_size");
  cfg.memory_len = j.at("memory_len");
  cfg.max_seq_len = j.at("max_seq_len");
  return cfg;
}

Parameters Parameters::shaped(const ModelConfig& cfg) {
  cfg.validate();
  Parameters p;
  const int c = cfg.d_model;
  p.tok_emb = Mat::Zero(cfg.vocab_size, c);
  p.pos_emb = Mat::Zero(cfg.pos_table_rows(), c);
  p.layers.resize(cfg.n_layers);
  for (auto& l : p.layers) {
    l.ln1_g = Mat::Ones(1, c);
    l.ln1_b = Mat::Zero(1, c);
    l.w_qkv = Mat::Zero(c, 3 * c);
    l.b_qkv = Mat::Zero(1, 3 * c);
    l.w_o = Mat::Zero(c, c);
    l.b_o = Mat::Zero(1, c);
    l.ln2_g = Mat::Ones(1, c);
    l.ln2_b = Mat::Zero(1, c);
    l.w1 = Mat::Zero(c, cfg.d_ff);
    l.b1 = Mat::Zero(1, cfg.d_ff);
    l.w2 = Mat::Zero(cfg.d_ff, c);
    l.b2 = Mat::Zero(1, c);
  }
  p.lnf_g = Mat::Ones(1, c);
  p.lnf_b = Mat::Zero(1, c);
  p.w_out = Mat::Zero(c, cfg.vocab_size);
  return p;
}

void Parameters::random_init(const ModelConfig& cfg, Rng& rng) {
  *this = shaped(cfg);
  const double std = 0.02;
  auto fill = [&](Mat& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = std * rng.normal();
    }
  };
  fill(tok_emb);
  fill(pos_emb);
  for (auto& l : layers) {
    fill(l.w_qkv);
    fill(l.w_o);
    fill(l.w1);
    fill(l.w2);
  }
  fill(w_out);
}

size_t Parameters::parameter_count() const {
  size_t n = 0;
  for_each_tensor([&](const std::string&, const Mat& m) { n += m.size(); });
  return n;
}

bool Parameters::all_finite() const {
  bool ok = true;
  for_each_tensor([&](const std::string&, const Mat& m) { ok = ok && m.allFinite(); });
  return ok;
}

void Parameters::set_zero() {
  for_each_tensor([](const std::string&, Mat& m) { m.setZero(); });
}

void TrainConfig::validate() const {
  if (warmup_steps > total_steps) throw std::invalid_argument("warmup_steps must be <= total_steps");
  if (budget_text < 0 || budget_summary < 0) throw std::invalid_argument("budgets must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
}

double lr_at(const TrainConfig& cfg, int64_t step) {
  if (cfg.total_steps <= 0) return cfg.learning_rate;
  const double s = static_cast<double>(std::clamp<int64_t>(step, 0, cfg.total_steps));
  if (cfg.warmup_steps > 0 && s <= cfg.warmup_steps) {
    return cfg.learning_rate * s / cfg.warmup_steps;
  }
  const double denom = std::max(1.0, static_cast<double>(cfg.total_steps - cfg.warmup_steps));
  return cfg.learning_rate * (cfg.total_steps - s) / denom;
}

AdamState AdamState::zeros_for(Parameters& params) {
  AdamState st;
  params.for_each_tensor([&](const std::string&, Mat& m) {
    st.m.push_back(Mat::Zero(m.rows(), m.cols()));
    st.v.push_back(Mat::Zero(m.rows(), m.cols()));
  });
  return st;
}

double nll_loss(const Mat& logits, std::span<const TokenId> targets,
                std::span<const uint8_t> scored) {
  if (static_cast<size_t>(logits.rows()) != targets.size() || targets.size() != scored.size()) {
    throw std::invalid_argument("nll_loss: shape mismatch");
  }
  double total = 0.0;
  int64_t count = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    if (!scored[r]) continue;
    const double mx = logits.row(r).maxCoeff();
    const double lse = std::log((logits.row(r).array() - mx).exp().sum()) + mx;
    total += lse - logits(r, targets[r]);
    ++count;
  }
  if (count == 0) throw std::runtime_error("nll_loss: no scored positions");
  return total / static_cast<double>(count);
}

Model::Model(const ModelConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(0);
  rng.reseed(init_seed);
  params_.random_init(cfg_, rng);
}

namespace {

// Forward pass over a padded batch with a uniform-length per-item memory.
// Fills the trace with everything the backward pass and cache roll need.
void core_forward(const ModelConfig& cfg, const Parameters& p, const TrainBatch& batch,
                  const std::vector<MemoryCache>* mems, Trace& tr, bool train, Rng* rng) {
  const int b_count = batch.batch;
  const int t_len = batch.length;
  if (t_len > cfg.max_seq_len) {
    throw std::invalid_argument("forward: input length " + std::to_string(t_len) +
                                " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  if (static_cast<int>(batch.ids.size()) != b_count * t_len) {
    throw std::invalid_argument("forward: batch shape mismatch");
  }
  int mem_len = 0;
  if (mems) {
    if (static_cast<int>(mems->size()) != b_count) {
      throw std::invalid_argument("forward: one memory cache per batch item required");
    }
    mem_len = (*mems)[0].length();
    for (const auto& m : *mems) {
      if (m.length() != mem_len) throw std::invalid_argument("forward: uneven memory lengths");
      if (!m.empty() && static_cast<int>(m.layer_input.size()) != cfg.n_layers) {
        throw std::invalid_argument("forward: memory layer count mismatch");
      }
    }
    if (mem_len > cfg.memory_len) throw std::invalid_argument("forward: memory exceeds memory_len");
  }

  const int c = cfg.d_model;
  const int heads = cfg.n_heads;
  const int hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const int rows = b_count * t_len;
  const int all_t = mem_len + t_len;
  const bool dropping = train && cfg.dropout > 0.0 && rng != nullptr;

  tr.batch = b_count;
  tr.length = t_len;
  tr.mem_len = mem_len;
  tr.ids = batch.ids;
  tr.layers.assign(cfg.n_layers, LayerTrace{});

  tr.x0.resize(rows, c);
  for (int b = 0; b < b_count; ++b) {
    for (int t = 0; t < t_len; ++t) {
      const TokenId id = batch.ids[b * t_len + t];
      if (id < 0 || id >= cfg.vocab_size) throw std::invalid_argument("forward: token id out of range");
      tr.x0.row(b * t_len + t) = p.tok_emb.row(id) + p.pos_emb.row(mem_len + t);
    }
  }
  if (dropping) {
    dropout_mask(tr.drop_emb, rows, c, cfg.dropout, *rng);
    tr.x0 = tr.x0.cwiseProduct(tr.drop_emb);
  }

  Mat x = tr.x0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto& lt = tr.layers[l];
    const auto& lp = p.layers[l];
    lt.in = x;

    // K/V context rows: cached states then current states, per item
    Mat all_in(b_count * all_t, c);
    for (int b = 0; b < b_count; ++b) {
      if (mem_len > 0) {
        all_in.middleRows(b * all_t, mem_len) = (*mems)[b].layer_input[l];
      }
      all_in.middleRows(b * all_t + mem_len, t_len) = x.middleRows(b * t_len, t_len);
    }
    ln_forward(all_in, lp.ln1_g, lp.ln1_b, lt.ln1_hat, lt.ln1_rstd, lt.ln1_out);
    lt.qkv.noalias() = lt.ln1_out * lp.w_qkv;
    lt.qkv.rowwise() += lp.b_qkv.row(0);

    lt.att.assign(static_cast<size_t>(b_count) * heads, Mat());
    lt.ctx.resize(rows, c);
    for (int b = 0; b < b_count; ++b) {
      const int cur0 = b * all_t + mem_len;
      for (int h = 0; h < heads; ++h) {
        const auto q = lt.qkv.block(cur0, h * hd, t_len, hd);
        const auto k = lt.qkv.block(b * all_t, c + h * hd, all_t, hd);
        const auto v = lt.qkv.block(b * all_t, 2 * c + h * hd, all_t, hd);
        Mat scores = q * k.transpose() * scale;  // t_len x all_t
        Mat& att = lt.att[b * heads + h];
        att = Mat::Zero(t_len, all_t);
        for (int t = 0; t < t_len; ++t) {
          const int valid = mem_len + t + 1;
          auto row = scores.row(t).head(valid);
          const double mx = row.maxCoeff();
          Eigen::RowVectorXd e = (row.array() - mx).exp();
          att.row(t).head(valid) = e / e.sum();
        }
        lt.ctx.block(b * t_len, h * hd, t_len, hd).noalias() = att * v;
      }
    }

    Mat attn_out = lt.ctx * lp.w_o;
    attn_out.rowwise() += lp.b_o.row(0);
    if (dropping) {
      dropout_mask(lt.drop_attn, rows, c, cfg.dropout, *rng);
      attn_out = attn_out.cwiseProduct(lt.drop_attn);
    }
    lt.mid = x + attn_out;

    ln_forward(lt.mid, lp.ln2_g, lp.ln2_b, lt.ln2_hat, lt.ln2_rstd, lt.ln2_out);
    lt.f1.noalias() = lt.ln2_out * lp.w1;
    lt.f1.rowwise() += lp.b1.row(0);
    lt.f1a = lt.f1.unaryExpr([](double v) { return gelu(v); });
    Mat ffn_out = lt.f1a * lp.w2;
    ffn_out.rowwise() += lp.b2.row(0);
    if (dropping) {
      dropout_mask(lt.drop_ffn, rows, c, cfg.dropout, *rng);
      ffn_out = ffn_out.cwiseProduct(lt.drop_ffn);
    }
    x = lt.mid + ffn_out;
  }

  ln_forward(x, p.lnf_g, p.lnf_b, tr.lnf_hat, tr.lnf_rstd, tr.lnf_out);
}

void roll_memory(const ModelConfig& cfg, const Trace& tr, const std::vector<MemoryCache>* mems,
                 std::vector<MemoryCache>& out) {
  out.assign(tr.batch, MemoryCache{});
  if (cfg.memory_len == 0) return;
  const int keep = std::min(cfg.memory_len, tr.mem_len + tr.length);
  for (int b = 0; b < tr.batch; ++b) {
    out[b].layer_input.resize(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
      Mat merged(tr.mem_len + tr.length, cfg.d_model);
      if (tr.mem_len > 0) merged.topRows(tr.mem_len) = (*mems)[b].layer_input[l];
      merged.bottomRows(tr.length) = tr.layers[l].in.middleRows(b * tr.length, tr.length);
      out[b].layer_input[l] = merged.bottomRows(keep);
    }
  }
}

// Backward from a gradient at the final layernorm output. Returns the loss's
// gradient contributions in `grads` (accumulated).
void core_backward(const ModelConfig& cfg, const Parameters& p, const Trace& tr, const Mat& d_hidden,
                   Parameters& grads) {
  const int b_count = tr.batch;
  const int t_len = tr.length;
  const int mem_len = tr.mem_len;
  const int all_t = mem_len + t_len;
  const int c = cfg.d_model;
  const int heads = cfg.n_heads;
  const int hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const int rows = b_count * t_len;

  Mat dx;
  ln_backward(d_hidden, tr.lnf_hat, tr.lnf_rstd, p.lnf_g, dx, grads.lnf_g, grads.lnf_b);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& lt = tr.layers[l];
    const auto& lp = p.layers[l];
    auto& lg = grads.layers[l];

    // FFN branch
    Mat d_ffn_out = dx;
    if (lt.drop_ffn.size()) d_ffn_out = d_ffn_out.cwiseProduct(lt.drop_ffn);
    lg.b2.row(0) += d_ffn_out.colwise().sum();
    lg.w2.noalias() += lt.f1a.transpose() * d_ffn_out;
    Mat d_f1a = d_ffn_out * lp.w2.transpose();
    Mat d_f1 = d_f1a.cwiseProduct(lt.f1.unaryExpr([](double v) { return gelu_deriv(v); }));
    lg.b1.row(0) += d_f1.colwise().sum();
    lg.w1.noalias() += lt.ln2_out.transpose() * d_f1;
    Mat d_ln2_out = d_f1 * lp.w1.transpose();
    Mat d_mid;
    ln_backward(d_ln2_out, lt.ln2_hat, lt.ln2_rstd, lp.ln2_g, d_mid, lg.ln2_g, lg.ln2_b);
    d_mid += dx;  // residual

    // attention branch
    Mat d_attn_out = d_mid;
    if (lt.drop_attn.size()) d_attn_out = d_attn_out.cwiseProduct(lt.drop_attn);
    lg.b_o.row(0) += d_attn_out.colwise().sum();
    lg.w_o.noalias() += lt.ctx.transpose() * d_attn_out;
    Mat d_ctx = d_attn_out * lp.w_o.transpose();

    Mat d_qkv = Mat::Zero(b_count * all_t, 3 * c);
    for (int b = 0; b < b_count; ++b) {
      const int cur0 = b * all_t + mem_len;
      for (int h = 0; h < heads; ++h) {
        const auto q = lt.qkv.block(cur0, h * hd, t_len, hd);
        const auto k = lt.qkv.block(b * all_t, c + h * hd, all_t, hd);
        const auto v = lt.qkv.block(b * all_t, 2 * c + h * hd, all_t, hd);
        const Mat& att = lt.att[b * heads + h];
        const auto d_ctx_bh = d_ctx.block(b * t_len, h * hd, t_len, hd);

        Mat d_att = d_ctx_bh * v.transpose();                       // t_len x all_t
        d_qkv.block(b * all_t, 2 * c + h * hd, all_t, hd).noalias() += att.transpose() * d_ctx_bh;

        // softmax rows: masked entries have att == 0, so they contribute 0
        Mat d_scores(t_len, all_t);
        for (int t = 0; t < t_len; ++t) {
          const double dot = d_att.row(t).cwiseProduct(att.row(t)).sum();
          d_scores.row(t) = (att.row(t).array() * (d_att.row(t).array() - dot)).matrix();
        }
        d_qkv.block(cur0, h * hd, t_len, hd).noalias() += d_scores * k * scale;
        d_qkv.block(b * all_t, c + h * hd, all_t, hd).noalias() +=
            d_scores.transpose() * q * scale;
      }
    }

    lg.b_qkv.row(0) += d_qkv.colwise().sum();
    lg.w_qkv.noalias() += lt.ln1_out.transpose() * d_qkv;
    Mat d_ln1_out = d_qkv * lp.w_qkv.transpose();
    Mat d_all_in;
    ln_backward(d_ln1_out, lt.ln1_hat, lt.ln1_rstd, lp.ln1_g, d_all_in, lg.ln1_g, lg.ln1_b);

    // residual + current rows of the LN1 path; memory rows are constants
    dx = d_mid;
    for (int b = 0; b < b_count; ++b) {
      dx.middleRows(b * t_len, t_len) += d_all_in.middleRows(b * all_t + mem_len, t_len);
    }
  }

  if (tr.drop_emb.size()) dx = dx.cwiseProduct(tr.drop_emb);
  for (int b = 0; b < b_count; ++b) {
    for (int t = 0; t < t_len; ++t) {
      grads.tok_emb.row(tr.ids[b * t_len + t]) += dx.row(b * t_len + t);
      grads.pos_emb.row(mem_len + t) += dx.row(b * t_len + t);
    }
  }
}

}  // namespace

Mat Model::forward(std::span<const TokenId> ids, const MemoryCache& mem, MemoryCache* new_mem) const {
  if (ids.empty()) throw std::invalid_argument("forward: empty input");
  TrainBatch batch;
  batch.batch = 1;
  batch.length = static_cast<int>(ids.size());
  batch.ids.assign(ids.begin(), ids.end());
  std::vector<MemoryCache> mems{mem};
  Trace tr;
  core_forward(cfg_, params_, batch, &mems, tr, false, nullptr);
  if (new_mem) {
    std::vector<MemoryCache> rolled;
    roll_memory(cfg_, tr, &mems, rolled);
    *new_mem = std::move(rolled[0]);
  }
  Mat logits = tr.lnf_out * params_.w_out;
  return logits;
}

Mat Model::forward(std::span<const TokenId> ids) const {
  MemoryCache empty;
  return forward(ids, empty, nullptr);
}

Mat Model::forward_hidden(std::span<const TokenId> ids) const {
  if (ids.empty()) throw std::invalid_argument("forward_hidden: empty input");
  TrainBatch batch;
  batch.batch = 1;
  batch.length = static_cast<int>(ids.size());
  batch.ids.assign(ids.begin(), ids.end());
  Trace tr;
  core_forward(cfg_, params_, batch, nullptr, tr, false, nullptr);
  return tr.lnf_out;
}

namespace {

Vec log_softmax_row(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  const double mx = row.maxCoeff();
  const double lse = std::log((row.array() - mx).exp().sum()) + mx;
  return (row.array() - lse).matrix().transpose();
}

}  // namespace

double Model::sequence_log_prob(std::span<const TokenId> conditioning,
                                std::span<const TokenId> target) const {
  if (conditioning.empty()) throw std::invalid_argument("sequence_log_prob: empty conditioning");
  if (target.empty()) return 0.0;
  std::vector<TokenId> full(conditioning.begin(), conditioning.end());
  full.insert(full.end(), target.begin(), target.end());

  const size_t first_scored = conditioning.size();  // full[p+1] scored when p+1 >= first_scored
  double total = 0.0;
  MemoryCache mem;
  size_t pos = 0;
  while (pos + 1 < full.size()) {
    const size_t chunk = std::min<size_t>(cfg_.max_seq_len, full.size() - pos);
    std::span<const TokenId> span(full.data() + pos, chunk);
    MemoryCache next;
    Mat logits = forward(span, mem, &next);
    for (size_t t = 0; t < chunk; ++t) {
      const size_t predicted = pos + t + 1;
      if (predicted >= first_scored && predicted < full.size()) {
        total += log_softmax_row(logits.row(t))(full[predicted]);
      }
    }
    mem = std::move(next);
    pos += chunk;
  }
  return total;
}

Model::StepState Model::prime(std::span<const TokenId> prefix) const {
  if (prefix.empty()) throw std::invalid_argument("prime: empty prefix");
  StepState st;
  size_t pos = 0;
  Mat logits;
  while (pos < prefix.size()) {
    const size_t chunk = std::min<size_t>(cfg_.max_seq_len, prefix.size() - pos);
    std::span<const TokenId> span(prefix.data() + pos, chunk);
    MemoryCache next;
    logits = forward(span, st.mem, &next);
    st.mem = std::move(next);
    pos += chunk;
  }
  st.log_probs = log_softmax_row(logits.row(logits.rows() - 1));
  st.consumed = static_cast<int>(prefix.size());
  return st;
}

void Model::advance(StepState& state, TokenId token) const {
  const TokenId ids[1] = {token};
  MemoryCache next;
  Mat logits = forward(std::span<const TokenId>(ids, 1), state.mem, &next);
  state.mem = std::move(next);
  state.log_probs = log_softmax_row(logits.row(0));
  state.consumed += 1;
}

double Model::loss_and_gradients(const TrainBatch& batch, const std::vector<MemoryCache>* mems,
                                 std::vector<MemoryCache>* new_mems, Parameters& grads,
                                 Rng* dropout_rng) const {
  Trace tr;
  core_forward(cfg_, params_, batch, mems, tr, true, dropout_rng);
  if (new_mems) roll_memory(cfg_, tr, mems, *new_mems);

  Mat logits = tr.lnf_out * params_.w_out;
  const int rows = batch.batch * batch.length;
  int64_t scored = 0;
  for (int r = 0; r < rows; ++r) {
    if (batch.targets[r] >= 0) ++scored;
  }
  if (scored == 0) throw std::runtime_error("loss_and_gradients: no scored positions");

  double loss = 0.0;
  Mat d_logits = Mat::Zero(rows, cfg_.vocab_size);
  const double inv = 1.0 / static_cast<double>(scored);
  for (int r = 0; r < rows; ++r) {
    const TokenId target = batch.targets[r];
    if (target < 0) continue;
    const double mx = logits.row(r).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(r).array() - mx).exp();
    const double sum = e.sum();
    loss += std::log(sum) + mx - logits(r, target);
    d_logits.row(r) = e * (inv / sum);
    d_logits(r, target) -= inv;
  }
  loss *= inv;

  grads.w_out.noalias() += tr.lnf_out.transpose() * d_logits;
  Mat d_hidden = d_logits * params_.w_out.transpose();
  core_backward(cfg_, params_, tr, d_hidden, grads);
  return loss;
}

double Model::classifier_loss_and_gradients(const ClassifierBatch& batch, const Mat& head_w,
                                            const Mat& head_b, Parameters& grads, Mat& head_w_grad,
                                            Mat& head_b_grad, Rng* dropout_rng) const {
  TrainBatch tb;
  tb.batch = batch.batch;
  tb.length = batch.length;
  tb.ids = batch.ids;
  Trace tr;
  core_forward(cfg_, params_, tb, nullptr, tr, true, dropout_rng);

  const double inv = 1.0 / static_cast<double>(batch.batch);
  double loss = 0.0;
  Mat d_hidden = Mat::Zero(batch.batch * batch.length, cfg_.d_model);
  for (int b = 0; b < batch.batch; ++b) {
    const int last = b * batch.length + batch.lengths[b] - 1;
    const Eigen::RowVectorXd h = tr.lnf_out.row(last);
    Eigen::RowVectorXd logits2 = h * head_w + head_b.row(0);
    const double mx = logits2.maxCoeff();
    Eigen::RowVectorXd e = (logits2.array() - mx).exp();
    const double sum = e.sum();
    const int label = batch.labels[b];
    loss += std::log(sum) + mx - logits2(label);
    Eigen::RowVectorXd d_logits2 = e * (inv / sum);
    d_logits2(label) -= inv;
    head_w_grad.noalias() += h.transpose() * d_logits2;
    head_b_grad.row(0) += d_logits2;
    d_hidden.row(last) = d_logits2 * head_w.transpose();
  }
  loss *= inv;
  core_backward(cfg_, params_, tr, d_hidden, grads);
  return loss;
}

void adam_update(Parameters& params, const Parameters& grads, AdamState& state,
                 const TrainConfig& cfg) {
  state.step += 1;
  const double lr = lr_at(cfg, state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

  size_t idx = 0;
  std::vector<const Mat*> gs;
  grads.for_each_tensor([&](const std::string&, const Mat& g) { gs.push_back(&g); });
  params.for_each_tensor([&](const std::string&, Mat& m) {
    const Mat& g = *gs[idx];
    Mat& mm = state.m[idx];
    Mat& vv = state.v[idx];
    mm = cfg.beta1 * mm + (1.0 - cfg.beta1) * g;
    vv = cfg.beta2 * vv + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    m.array() -= lr * (mm.array() / bc1) / ((vv.array() / bc2).sqrt() + cfg.adam_eps);
    ++idx;
  });
}

double train_step(Model& model, AdamState& adam, const TrainBatch& batch, const TrainConfig& cfg,
                  Rng& dropout_rng) {
  Parameters grads = Parameters::shaped(model.config());
  grads.set_zero();
  const double loss = model.loss_and_gradients(batch, nullptr, nullptr, grads, &dropout_rng);
  if (!std::isfinite(loss)) {
    std::ostringstream msg;
    msg << "train_step: non-finite loss " << loss << " at step " << adam.step + 1 << " (batch "
        << batch.batch << "x" << batch.length << ")";
    throw std::runtime_error(msg.str());
  }
  adam_update(model.params(), grads, adam, cfg);
  return loss;
}

BinaryClassifier::BinaryClassifier(const ModelConfig& cfg, uint64_t init_seed)
    : trunk(cfg, init_seed) {
  Rng rng(0);
  rng.reseed(init_seed ^ 0x5eedf00dULL);
  head_w = Mat::Zero(cfg.d_model, 2);
  for (Eigen::Index r = 0; r < head_w.rows(); ++r) {
    for (Eigen::Index c = 0; c < 2; ++c) head_w(r, c) = 0.02 * rng.normal();
  }
  head_b = Mat::Zero(1, 2);
}

double BinaryClassifier::probability(std::span<const TokenId> ids) const {
  std::vector<TokenId> clipped;
  if (static_cast<int>(ids.size()) > trunk.config().max_seq_len) {
    clipped.assign(ids.end() - trunk.config().max_seq_len, ids.end());
    ids = clipped;
  }
  Mat h = trunk.forward_hidden(ids);
  Eigen::RowVectorXd logits2 = h.row(h.rows() - 1) * head_w + head_b.row(0);
  const double mx = logits2.maxCoeff();
  const double e0 = std::exp(logits2(0) - mx);
  const double e1 = std::exp(logits2(1) - mx);
  return e1 / (e0 + e1);
}

}  // namespace soe
