#pragma once

// Residual vector quantizer over truncated DCT frames, with a least-squares
// alternate decoder.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "latentmark/core.hpp"
#include "latentmark/corpus.hpp"
#include "latentmark/dct.hpp"
#include "latentmark/kmeans.hpp"

namespace latentmark {

struct CodecConfig {
  int sample_rate = 16000;
  int frame_rate = 50;
  int n_codebooks = 4;
  int codebook_size = 256;
  int kept_coeffs = 64;
  int kmeans_iters = 25;
  std::int64_t seed = 7;

  int frame_len() const { return sample_rate / frame_rate; }

  double bitrate_bps() const { return n_codebooks * std::log2(double(codebook_size)) * frame_rate; }

  void validate() const {
    if (sample_rate <= 0 || frame_rate <= 0) throw ParameterError("codec: rates must be positive");
    if (sample_rate % frame_rate != 0)
      throw ParameterError("codec: sample_rate / frame_rate must be an exact integer");
    if (n_codebooks < 1) throw ParameterError("codec: n_codebooks must be >= 1");
    if (codebook_size < 1 || codebook_size > 65535)
      throw ParameterError("codec: codebook_size must be in [1, 65535]");
    if (kept_coeffs < 1 || kept_coeffs > frame_len())
      throw ParameterError("codec: kept_coeffs must be in [1, frame_len]");
    if (kmeans_iters < 0) throw ParameterError("codec: kmeans_iters must be >= 0");
  }
};

/// K x N codeword indices, stream-major.
struct TokenGrid {
  int n_streams = 0;
  int n_frames = 0;
  int vocab = 0;
  std::vector<std::uint16_t> tokens;

  TokenGrid() = default;
  TokenGrid(int k, int n, int v) : n_streams(k), n_frames(n), vocab(v), tokens(std::size_t(k) * std::size_t(n), 0) {}

  std::uint16_t& at(int stream, int frame) { return tokens[std::size_t(stream) * std::size_t(n_frames) + std::size_t(frame)]; }
  std::uint16_t at(int stream, int frame) const {
    return tokens[std::size_t(stream) * std::size_t(n_frames) + std::size_t(frame)];
  }

  /// Throws CorruptionError at the first index >= vocab.
  void check() const {
    for (int j = 0; j < n_streams; ++j)
      for (int i = 0; i < n_frames; ++i)
        if (at(j, i) >= vocab)
          throw CorruptionError("token grid: index " + std::to_string(at(j, i)) + " >= V=" + std::to_string(vocab) +
                                " at stream " + std::to_string(j) + ", frame " + std::to_string(i));
  }

  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

struct Codec {
  CodecConfig config;
  std::vector<MatrixF> codebooks;  // K tables, each V x d_q
  std::vector<double> stage_mse;   // training MSE after each stage (empty when loaded from disk)
};

namespace detail {

inline void check_frames(std::size_t len, int frame_len, const char* op) {
  if (len < std::size_t(frame_len))
    throw ParameterError(std::string(op) + ": signal of " + std::to_string(len) + " samples is shorter than one frame (" +
                         std::to_string(frame_len) + ")");
}

inline MatrixF analysis_matrix(int frame_len, int kept) {
  const auto basis = dct_basis(std::size_t(frame_len));
  MatrixF m(kept, frame_len);
  for (int k = 0; k < kept; ++k)
    for (int t = 0; t < frame_len; ++t) m(k, t) = float(basis->row(std::size_t(k))[std::size_t(t)]);
  return m;
}

}  // namespace detail

/// Leading DCT coefficients of each non-overlapping frame; N x d_q.
inline MatrixF frame_features(std::span<const float> samples, int frame_len, int kept) {
  const std::size_t n = samples.size() / std::size_t(frame_len);
  Eigen::Map<const MatrixF> frames(samples.data(), Eigen::Index(n), frame_len);
  const MatrixF basis = detail::analysis_matrix(frame_len, kept);
  MatrixF out = frames * basis.transpose();
  return out;
}

/// Inverse of `frame_features`: N x d_q coefficients to N*frame_len samples, clamped.
inline std::vector<float> synthesize_frames(const MatrixF& coeffs, int frame_len) {
  const MatrixF basis = detail::analysis_matrix(frame_len, int(coeffs.cols()));
  std::vector<float> out(std::size_t(coeffs.rows()) * std::size_t(frame_len));
  Eigen::Map<MatrixF> frames(out.data(), coeffs.rows(), frame_len);
  frames.noalias() = coeffs * basis;
  clamp_in_place(out);
  return out;
}

/// Fit K residual stages on raw feature rows. Exposed for small-scale checks;
/// `train_rvq` is the corpus-level entry point.
inline Codec train_rvq_features(MatrixF features, const CodecConfig& config) {
  Codec codec;
  codec.config = config;
  Rng rng = make_rng(std::uint64_t(config.seed), 0x525651u);
  for (int j = 0; j < config.n_codebooks; ++j) {
    KMeansResult km = kmeans(features, config.codebook_size, config.kmeans_iters, rng);
    for (Eigen::Index i = 0; i < features.rows(); ++i) features.row(i) -= km.centroids.row(km.assignment[std::size_t(i)]);
    codec.codebooks.push_back(std::move(km.centroids));
    codec.stage_mse.push_back(km.mse);
  }
  return codec;
}

inline Codec train_rvq(std::span<const Signal> corpus, const CodecConfig& config) {
  config.validate();
  const int flen = config.frame_len();
  std::size_t frames = 0;
  for (const Signal& s : corpus) frames += s.size() / std::size_t(flen);
  const std::size_t needed = 10 * std::size_t(config.codebook_size);
  if (frames < needed)
    throw DataInsufficiencyError("train_rvq: corpus yields " + std::to_string(frames) + " frames, need at least " +
                                 std::to_string(needed) + " (10 x codebook_size)");
  MatrixF features(Eigen::Index(frames), config.kept_coeffs);
  Eigen::Index row = 0;
  for (const Signal& s : corpus) {
    if (s.sample_rate != config.sample_rate)
      throw ParameterError("train_rvq: corpus sample rate " + std::to_string(s.sample_rate) + " != codec rate " +
                           std::to_string(config.sample_rate));
    MatrixF f = frame_features(s.samples, flen, config.kept_coeffs);
    features.middleRows(row, f.rows()) = f;
    row += f.rows();
  }
  return train_rvq_features(std::move(features), config);
}

/// Greedy residual quantization of feature rows using the first `stages` books.
inline TokenGrid quantize_features(MatrixF residual, const Codec& codec, int stages = -1) {
  const auto& cfg = codec.config;
  if (stages < 0) stages = cfg.n_codebooks;
  TokenGrid grid(cfg.n_codebooks, int(residual.rows()), cfg.codebook_size);
  std::vector<int> best;
  for (int j = 0; j < stages; ++j) {
    detail::nearest_rows(residual, codec.codebooks[std::size_t(j)], best);
    for (Eigen::Index i = 0; i < residual.rows(); ++i) {
      grid.at(j, int(i)) = std::uint16_t(best[std::size_t(i)]);
      residual.row(i) -= codec.codebooks[std::size_t(j)].row(best[std::size_t(i)]);
    }
  }
  return grid;
}

inline TokenGrid encode(const Signal& signal, const Codec& codec) {
  const int flen = codec.config.frame_len();
  detail::check_frames(signal.size(), flen, "encode");
  return quantize_features(frame_features(signal.samples, flen, codec.config.kept_coeffs), codec);
}

/// Sum of the selected centroids per frame over the first `stages` books; N x d_q.
inline MatrixF dequantize(const TokenGrid& tokens, const Codec& codec, int stages = -1) {
  const auto& cfg = codec.config;
  if (tokens.n_streams != cfg.n_codebooks || tokens.vocab != cfg.codebook_size)
    throw ParameterError("decode: token grid shape (K=" + std::to_string(tokens.n_streams) + ", V=" +
                         std::to_string(tokens.vocab) + ") does not match codec");
  tokens.check();
  if (stages < 0) stages = cfg.n_codebooks;
  MatrixF coeffs = MatrixF::Zero(tokens.n_frames, cfg.kept_coeffs);
  for (int j = 0; j < stages; ++j)
    for (int i = 0; i < tokens.n_frames; ++i) coeffs.row(i) += codec.codebooks[std::size_t(j)].row(tokens.at(j, i));
  return coeffs;
}

inline Signal decode(const TokenGrid& tokens, const Codec& codec, int stages = -1) {
  return Signal(synthesize_frames(dequantize(tokens, codec, stages), codec.config.frame_len()), codec.config.sample_rate);
}

inline Signal roundtrip(const Signal& signal, const Codec& codec) { return decode(encode(signal, codec), codec); }

// ---------------------------------------------------------------------------
// Alternate decoder: linear postfilter on summed coefficients.

struct AltDecoder {
  MatrixF weight;         // d_q x d_q, applied as y = W x + b
  Eigen::VectorXf bias;   // d_q
  double fit_mse = 0.0;   // per-frame squared error of the fit on its corpus
  double raw_mse = 0.0;   // same for the plain decoder
};

inline AltDecoder train_alt_decoder(const Codec& codec, std::span<const Signal> corpus) {
  const int d = codec.config.kept_coeffs;
  const int flen = codec.config.frame_len();
  const Eigen::Index p = d + 1;
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(p, p);
  Eigen::MatrixXd cross = Eigen::MatrixXd::Zero(p, d);
  double yy = 0.0, raw = 0.0;
  std::size_t rows = 0;
  for (const Signal& s : corpus) {
    if (s.size() < std::size_t(flen)) continue;
    const MatrixF target = frame_features(s.samples, flen, d);
    const MatrixF quant = dequantize(quantize_features(target, codec), codec);
    Eigen::MatrixXd a(quant.rows(), p);
    a.leftCols(d) = quant.cast<double>();
    a.col(d).setOnes();
    const Eigen::MatrixXd y = target.cast<double>();
    gram.noalias() += a.transpose() * a;
    cross.noalias() += a.transpose() * y;
    yy += y.squaredNorm();
    raw += (y - a.leftCols(d)).squaredNorm();
    rows += std::size_t(quant.rows());
  }
  if (rows == 0) throw DataInsufficiencyError("train_alt_decoder: corpus has no complete frames");
  gram.diagonal().array() += 1e-6;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
    throw NumericError("train_alt_decoder: normal equations are singular despite ridge");
  const Eigen::MatrixXd theta = ldlt.solve(cross);  // p x d
  if (!theta.allFinite()) throw NumericError("train_alt_decoder: non-finite solution");

  AltDecoder alt;
  alt.weight = theta.topRows(d).transpose().cast<float>();
  alt.bias = theta.row(d).transpose().cast<float>();
  // ||y - A theta||^2 = y'y - 2 tr(theta' A'y) + tr(theta' A'A theta), ridge excluded.
  gram.diagonal().array() -= 1e-6;
  const double fit = yy - 2.0 * (theta.transpose() * cross).trace() + (theta.transpose() * gram * theta).trace();
  alt.fit_mse = std::max(fit, 0.0) / double(rows);
  alt.raw_mse = raw / double(rows);
  return alt;
}

inline Signal decode_alt(const TokenGrid& tokens, const Codec& codec, const AltDecoder& alt) {
  MatrixF coeffs = dequantize(tokens, codec);
  MatrixF filtered = coeffs * alt.weight.transpose();
  filtered.rowwise() += alt.bias.transpose();
  return Signal(synthesize_frames(filtered, codec.config.frame_len()), codec.config.sample_rate);
}

// ---------------------------------------------------------------------------
// Binary formats (little-endian).

namespace detail {

inline void put_f32(std::string& b, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(b, u);
}

inline float get_f32(const unsigned char* p) {
  const std::uint32_t u = get_u32(p);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

class Reader {
 public:
  Reader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}
  const unsigned char* take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_));
    const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data()) + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() { return get_u32(take(4)); }
  std::uint16_t u16() { return get_u16(take(2)); }
  float f32() { return get_f32(take(4)); }
  void magic(std::string_view m) {
    if (std::string_view(reinterpret_cast<const char*>(take(m.size())), m.size()) != m)
      throw FormatError(what_ + ": bad magic, expected '" + std::string(m) + "'");
  }
  void finish() const {
    if (pos_ != bytes_.size()) throw FormatError(what_ + ": " + std::to_string(bytes_.size() - pos_) + " trailing bytes");
  }

 private:
  std::string_view bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string codec_bytes(const Codec& codec) {
  const auto& c = codec.config;
  std::string b = "RVQ1";
  for (int v : {c.sample_rate, c.frame_rate, c.n_codebooks, c.codebook_size, c.kept_coeffs})
    detail::put_u32(b, std::uint32_t(v));
  for (const MatrixF& book : codec.codebooks)
    for (Eigen::Index i = 0; i < book.size(); ++i) detail::put_f32(b, book.data()[i]);
  return b;
}

inline Codec parse_codec(std::string_view bytes) {
  detail::Reader r(bytes, "codec file");
  r.magic("RVQ1");
  Codec codec;
  auto& c = codec.config;
  c.sample_rate = int(r.u32());
  c.frame_rate = int(r.u32());
  c.n_codebooks = int(r.u32());
  c.codebook_size = int(r.u32());
  c.kept_coeffs = int(r.u32());
  try {
    c.validate();
  } catch (const ParameterError& e) {
    throw FormatError(std::string("codec file: invalid header: ") + e.what());
  }
  for (int j = 0; j < c.n_codebooks; ++j) {
    MatrixF book(c.codebook_size, c.kept_coeffs);
    for (Eigen::Index i = 0; i < book.size(); ++i) book.data()[i] = r.f32();
    if (!book.allFinite()) throw FormatError("codec file: non-finite centroid in book " + std::to_string(j));
    codec.codebooks.push_back(std::move(book));
  }
  r.finish();
  return codec;
}

inline std::string tokens_bytes(const TokenGrid& g) {
  std::string b = "TOK1";
  detail::put_u32(b, std::uint32_t(g.n_streams));
  detail::put_u32(b, std::uint32_t(g.n_frames));
  detail::put_u32(b, std::uint32_t(g.vocab));
  for (std::uint16_t t : g.tokens) detail::put_u16(b, t);
  return b;
}

inline TokenGrid parse_tokens(std::string_view bytes) {
  detail::Reader r(bytes, "token file");
  r.magic("TOK1");
  const int k = int(r.u32()), n = int(r.u32()), v = int(r.u32());
  if (k < 1 || n < 0 || v < 1 || v > 65535) throw FormatError("token file: invalid header");
  TokenGrid g(k, n, v);
  for (auto& t : g.tokens) t = r.u16();
  r.finish();
  g.check();
  return g;
}

inline void save_codec(const Codec& c, const std::filesystem::path& p) { write_file_atomic(p, codec_bytes(c)); }
inline Codec load_codec(const std::filesystem::path& p) { return parse_codec(read_file(p)); }
inline void save_tokens(const TokenGrid& g, const std::filesystem::path& p) { write_file_atomic(p, tokens_bytes(g)); }
inline TokenGrid load_tokens(const std::filesystem::path& p) { return parse_tokens(read_file(p)); }

}  // namespace latentmark
