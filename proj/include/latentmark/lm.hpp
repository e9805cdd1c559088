#pragma once

// Token language model over RVQ streams: delay interleaving, a per-stream
// conditional count model with additive smoothing and backoff, top-k
// sampling, and count-mixing fine-tuning.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "latentmark/codec.hpp"
#include "latentmark/core.hpp"

namespace latentmark {

/// Token grid with stream j shifted right by delays[j]; index `vocab` is the pad.
struct DelayedGrid {
  int n_streams = 0;
  int length = 0;
  int vocab = 0;
  std::vector<int> delays;
  std::vector<std::uint16_t> tokens;

  std::uint16_t pad() const { return std::uint16_t(vocab); }
  int max_delay() const { return delays.empty() ? 0 : *std::max_element(delays.begin(), delays.end()); }
  std::uint16_t& at(int stream, int pos) { return tokens[std::size_t(stream) * std::size_t(length) + std::size_t(pos)]; }
  std::uint16_t at(int stream, int pos) const {
    return tokens[std::size_t(stream) * std::size_t(length) + std::size_t(pos)];
  }

  friend bool operator==(const DelayedGrid&, const DelayedGrid&) = default;
};

inline DelayedGrid apply_delay(const TokenGrid& grid, const std::vector<int>& delays) {
  if (int(delays.size()) != grid.n_streams)
    throw ParameterError("apply_delay: got " + std::to_string(delays.size()) + " delays for " +
                         std::to_string(grid.n_streams) + " streams");
  for (int d : delays) require(d >= 0, "apply_delay: delays must be non-negative");
  if (grid.vocab > 65534) throw ParameterError("apply_delay: vocab leaves no room for the pad token");
  DelayedGrid out;
  out.n_streams = grid.n_streams;
  out.vocab = grid.vocab;
  out.delays = delays;
  out.length = grid.n_frames + out.max_delay();
  out.tokens.assign(std::size_t(out.n_streams) * std::size_t(out.length), out.pad());
  for (int j = 0; j < grid.n_streams; ++j)
    for (int i = 0; i < grid.n_frames; ++i) out.at(j, i + delays[std::size_t(j)]) = grid.at(j, i);
  return out;
}

inline TokenGrid remove_delay(const DelayedGrid& grid) {
  if (int(grid.delays.size()) != grid.n_streams) throw ParameterError("remove_delay: delays do not match stream count");
  const int n = grid.length - grid.max_delay();
  if (n < 0) throw CorruptionError("remove_delay: grid shorter than its maximum delay");
  TokenGrid out(grid.n_streams, n, grid.vocab);
  for (int j = 0; j < grid.n_streams; ++j) {
    const int d = grid.delays[std::size_t(j)];
    for (int p = 0; p < grid.length; ++p) {
      const bool mandated_pad = p < d || p >= n + d;
      const std::uint16_t t = grid.at(j, p);
      if (mandated_pad != (t == grid.pad()))
        throw CorruptionError("remove_delay: " + std::string(mandated_pad ? "expected pad" : "unexpected pad") +
                              " at stream " + std::to_string(j) + ", position " + std::to_string(p));
      if (t > grid.pad())
        throw CorruptionError("remove_delay: token " + std::to_string(t) + " out of range at stream " +
                              std::to_string(j) + ", position " + std::to_string(p));
      if (!mandated_pad) out.at(j, p - d) = t;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Count tables

/// Sparse token counts for one context; entries sorted by token.
struct CountRow {
  double total = 0.0;
  std::vector<std::pair<std::uint16_t, double>> counts;

  void add(std::uint16_t token, double w) {
    auto it = std::lower_bound(counts.begin(), counts.end(), token,
                               [](const auto& e, std::uint16_t t) { return e.first < t; });
    if (it != counts.end() && it->first == token)
      it->second += w;
    else
      counts.insert(it, {token, w});
    total += w;
  }

  double count(std::uint16_t token) const {
    auto it = std::lower_bound(counts.begin(), counts.end(), token,
                               [](const auto& e, std::uint16_t t) { return e.first < t; });
    return (it != counts.end() && it->first == token) ? it->second : 0.0;
  }
};

/// Smoothed conditional over an alphabet: (count + delta) / (total + delta * alphabet).
struct Conditional {
  const CountRow* row = nullptr;  // null means no observations
  double delta = 0.0;
  int alphabet = 0;

  double denom() const { return (row ? row->total : 0.0) + delta * alphabet; }

  double prob(std::uint16_t token) const {
    const double den = denom();
    if (den <= 0.0) return 1.0 / alphabet;
    return ((row ? row->count(token) : 0.0) + delta) / den;
  }

  std::vector<double> dense() const {
    std::vector<double> p(static_cast<std::size_t>(alphabet));
    for (int t = 0; t < alphabet; ++t) p[std::size_t(t)] = prob(std::uint16_t(t));
    return p;
  }
};

struct ModelShape {
  int n_streams = 4;
  int vocab = 256;
  std::vector<int> delays{0, 1, 2, 4};

  int alphabet() const { return vocab + 1; }

  void validate() const {
    if (n_streams < 1) throw ParameterError("lm: n_streams must be >= 1");
    if (vocab < 1 || vocab > 65534) throw ParameterError("lm: vocab must be in [1, 65534]");
    if (int(delays.size()) != n_streams) throw ParameterError("lm: delays length must equal n_streams");
    for (std::size_t j = 0; j < delays.size(); ++j) {
      if (delays[j] < 0) throw ParameterError("lm: delays must be non-negative");
      if (j > 0 && delays[j] < delays[j - 1])
        throw ParameterError("lm: delays must be non-decreasing so coarser tokens precede finer ones");
    }
  }

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/// Per-stream conditional count model. Stream j predicts u[j][i] from
/// (u[j][i-1], u[j-1][i]); the first stream sees a constant coarse symbol and
/// position 0 sees the pad symbol as its predecessor.
class SequenceModel {
 public:
  SequenceModel() = default;
  SequenceModel(ModelShape shape, double delta, double c_min)
      : shape_(std::move(shape)), delta_(delta), c_min_(c_min), streams_(std::size_t(shape_.n_streams)) {
    shape_.validate();
    require(delta >= 0.0, "lm: smoothing delta must be >= 0");
    require(c_min >= 0.0, "lm: c_min must be >= 0");
  }

  const ModelShape& shape() const { return shape_; }
  double delta() const { return delta_; }
  double c_min() const { return c_min_; }
  int alphabet() const { return shape_.alphabet(); }

  std::uint32_t context_id(std::uint16_t prev, std::uint16_t coarse) const {
    return std::uint32_t(prev) * std::uint32_t(alphabet()) + coarse;
  }

  void add(int stream, std::uint16_t prev, std::uint16_t coarse, std::uint16_t token, double weight) {
    if (weight == 0.0) return;
    auto& s = streams_[std::size_t(stream)];
    s.full[context_id(prev, coarse)].add(token, weight);
    s.bigram[prev].add(token, weight);
    s.unigram.add(token, weight);
  }

  /// Count one un-delayed token grid.
  void add_grid(const TokenGrid& g, double weight = 1.0) {
    if (g.n_streams != shape_.n_streams || g.vocab != shape_.vocab)
      throw ParameterError("lm: grid shape (K=" + std::to_string(g.n_streams) + ", V=" + std::to_string(g.vocab) +
                           ") does not match the model");
    const auto pad = std::uint16_t(shape_.vocab);
    for (int j = 0; j < g.n_streams; ++j)
      for (int i = 0; i < g.n_frames; ++i)
        add(j, i > 0 ? g.at(j, i - 1) : pad, j > 0 ? g.at(j - 1, i) : pad, g.at(j, i), weight);
  }

  /// Smoothed conditional with backoff: full context, then same-stream
  /// predecessor, then the stream unigram.
  Conditional conditional(int stream, std::uint16_t prev, std::uint16_t coarse) const {
    const auto& s = streams_[std::size_t(stream)];
    Conditional c{nullptr, delta_, alphabet()};
    if (auto it = s.full.find(context_id(prev, coarse)); it != s.full.end() && it->second.total >= c_min_) {
      c.row = &it->second;
    } else if (auto jt = s.bigram.find(prev); jt != s.bigram.end() && jt->second.total >= c_min_) {
      c.row = &jt->second;
    } else if (s.unigram.total > 0.0) {
      c.row = &s.unigram;
    }
    return c;
  }

  double prob(int stream, std::uint16_t prev, std::uint16_t coarse, std::uint16_t token) const {
    return conditional(stream, prev, coarse).prob(token);
  }

  /// Total observation mass (sum over streams).
  double mass() const {
    double m = 0.0;
    for (const auto& s : streams_) m += s.unigram.total;
    return m;
  }

  /// Full-context rows of one stream, keyed by context id.
  const std::map<std::uint32_t, CountRow>& rows(int stream) const { return streams_[std::size_t(stream)].full; }

  /// Counts plus `weight` times the other model's counts.
  SequenceModel mixed_with(const SequenceModel& other, double weight) const {
    SequenceModel out = *this;
    if (weight == 0.0) return out;
    for (int j = 0; j < shape_.n_streams; ++j)
      for (const auto& [ctx, row] : other.rows(j))
        for (const auto& [tok, cnt] : row.counts)
          out.add(j, std::uint16_t(ctx / std::uint32_t(alphabet())), std::uint16_t(ctx % std::uint32_t(alphabet())),
                  tok, weight * cnt);
    return out;
  }

 private:
  struct Stream {
    std::map<std::uint32_t, CountRow> full;
    std::map<std::uint16_t, CountRow> bigram;
    CountRow unigram;
  };

  ModelShape shape_;
  double delta_ = 0.1;
  double c_min_ = 2.0;
  std::vector<Stream> streams_;
};

inline SequenceModel train_lm(std::span<const DelayedGrid> grids, const ModelShape& shape, double delta, double c_min) {
  SequenceModel model(shape, delta, c_min);
  for (std::size_t g = 0; g < grids.size(); ++g) {
    const DelayedGrid& d = grids[g];
    if (d.n_streams != shape.n_streams || d.vocab != shape.vocab || d.delays != shape.delays)
      throw ParameterError("train_lm: grid " + std::to_string(g) + " has a different configuration (K, V or delays)");
    model.add_grid(remove_delay(d));
  }
  return model;
}

inline SequenceModel finetune_lm(const SequenceModel& model, std::span<const DelayedGrid> clean, double weight) {
  require(weight >= 0.0, "finetune_lm: weight must be >= 0");
  SequenceModel extra = train_lm(clean, model.shape(), model.delta(), model.c_min());
  return model.mixed_with(extra, weight);
}

// ---------------------------------------------------------------------------
// Sampling

namespace detail {

/// The `k` most probable non-pad tokens of a conditional, most probable first,
/// ties to the lower index. Unobserved tokens all share the smoothing floor,
/// so they follow the observed ones in index order.
inline void top_candidates(const Conditional& c, int vocab, int k, std::vector<std::pair<std::uint16_t, double>>& out) {
  out.clear();
  const double den = c.denom();
  const double floor_p = den > 0.0 ? c.delta / den : 1.0 / c.alphabet;
  if (c.row) {
    for (const auto& [tok, cnt] : c.row->counts)
      if (tok < vocab && cnt > 0.0) out.emplace_back(tok, (cnt + c.delta) / den);
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    if (int(out.size()) > k) out.resize(std::size_t(k));
  }
  if (int(out.size()) >= k || floor_p <= 0.0) return;
  const std::size_t observed = out.size();
  for (int t = 0; t < vocab && int(out.size()) < k; ++t) {
    const bool seen = std::any_of(out.begin(), out.begin() + std::ptrdiff_t(observed),
                                  [t](const auto& e) { return e.first == t; }) ||
                      (c.row && c.row->count(std::uint16_t(t)) > 0.0);
    if (!seen) out.emplace_back(std::uint16_t(t), floor_p);
  }
}

}  // namespace detail

struct SamplingConfig {
  int top_k = 50;
  double temperature = 1.0;

  void validate() const {
    if (top_k < 1) throw ParameterError("sample_lm: top_k must be >= 1");
    if (!(temperature >= 0.0)) throw ParameterError("sample_lm: temperature must be >= 0");
  }
};

/// Autoregressive sampling over delayed positions, coarse-to-fine within a
/// position; the returned grid is un-delayed.
inline TokenGrid sample_lm(const SequenceModel& model, int n_frames, const SamplingConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  require(n_frames >= 1, "sample_lm: n_frames must be >= 1");
  const ModelShape& shape = model.shape();
  const int k_streams = shape.n_streams, vocab = shape.vocab;
  const auto pad = std::uint16_t(vocab);
  const int max_d = *std::max_element(shape.delays.begin(), shape.delays.end());
  TokenGrid out(k_streams, n_frames, vocab);
  Rng rng = make_rng(seed, 0x534D504Cu);
  std::vector<std::pair<std::uint16_t, double>> cand;
  for (int p = 0; p < n_frames + max_d; ++p) {
    for (int j = 0; j < k_streams; ++j) {
      const int i = p - shape.delays[std::size_t(j)];
      if (i < 0 || i >= n_frames) continue;  // mandated pad
      const std::uint16_t prev = i > 0 ? out.at(j, i - 1) : pad;
      const std::uint16_t coarse = j > 0 ? out.at(j - 1, i) : pad;
      detail::top_candidates(model.conditional(j, prev, coarse), vocab, cfg.top_k, cand);
      std::uint16_t pick = cand.front().first;
      if (cfg.temperature > 0.0 && cand.size() > 1) {
        double sum = 0.0;
        for (auto& [tok, w] : cand) {
          w = std::pow(w, 1.0 / cfg.temperature);
          sum += w;
        }
        double u = uniform01(rng) * sum;
        for (const auto& [tok, w] : cand) {
          pick = tok;
          if (u < w) break;
          u -= w;
        }
      }
      out.at(j, i) = pick;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary format: "SLM1", K, V, delays, delta (f64), c_min (f64), then per
// stream a count of triples and the sorted (context, token, count) triples.

namespace detail {

inline void put_f64(std::string& b, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  put_u32(b, std::uint32_t(u));
  put_u32(b, std::uint32_t(u >> 32));
}

inline double get_f64(Reader& r) {
  const std::uint64_t lo = r.u32(), hi = r.u32();
  const std::uint64_t u = lo | (hi << 32);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

}  // namespace detail

inline std::string model_bytes(const SequenceModel& m) {
  std::string b = "SLM1";
  const auto& s = m.shape();
  detail::put_u32(b, std::uint32_t(s.n_streams));
  detail::put_u32(b, std::uint32_t(s.vocab));
  for (int d : s.delays) detail::put_u32(b, std::uint32_t(d));
  detail::put_f64(b, m.delta());
  detail::put_f64(b, m.c_min());
  for (int j = 0; j < s.n_streams; ++j) {
    std::uint32_t n = 0;
    for (const auto& [ctx, row] : m.rows(j)) n += std::uint32_t(row.counts.size());
    detail::put_u32(b, n);
    for (const auto& [ctx, row] : m.rows(j))
      for (const auto& [tok, cnt] : row.counts) {
        detail::put_u32(b, ctx);
        detail::put_u16(b, tok);
        detail::put_f64(b, cnt);
      }
  }
  return b;
}

inline SequenceModel parse_model(std::string_view bytes) {
  detail::Reader r(bytes, "model file");
  r.magic("SLM1");
  ModelShape shape;
  shape.n_streams = int(r.u32());
  shape.vocab = int(r.u32());
  if (shape.n_streams < 1 || shape.n_streams > 64) throw FormatError("model file: invalid stream count");
  shape.delays.resize(std::size_t(shape.n_streams));
  for (int& d : shape.delays) d = int(r.u32());
  const double delta = detail::get_f64(r);
  const double c_min = detail::get_f64(r);
  SequenceModel m;
  try {
    m = SequenceModel(shape, delta, c_min);
  } catch (const ParameterError& e) {
    throw FormatError(std::string("model file: invalid header: ") + e.what());
  }
  const auto a = std::uint32_t(shape.alphabet());
  for (int j = 0; j < shape.n_streams; ++j) {
    const std::uint32_t n = r.u32();
    for (std::uint32_t e = 0; e < n; ++e) {
      const std::uint32_t ctx = r.u32();
      const std::uint16_t tok = r.u16();
      const double cnt = detail::get_f64(r);
      if (ctx >= a * a || tok >= a || !(cnt >= 0.0)) throw FormatError("model file: invalid count triple");
      m.add(j, std::uint16_t(ctx / a), std::uint16_t(ctx % a), tok, cnt);
    }
  }
  r.finish();
  return m;
}

inline void save_model(const SequenceModel& m, const std::filesystem::path& p) { write_file_atomic(p, model_bytes(m)); }
inline SequenceModel load_model(const std::filesystem::path& p) { return parse_model(read_file(p)); }

}  // namespace latentmark
