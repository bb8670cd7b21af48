// SPDX-License-Identifier: Apache-2.0
#include "starft/encoders.hpp"

#include <cmath>
#include <cstring>
#include <random>

namespace starft {

void EncoderDims::validate() const {
  if (input_dim <= 0 || hidden <= 0 || embed_dim <= 0 || vocab_size <= 0 || token_dim <= 0) {
    throw ValidationError("encoder dims must all be positive (input_dim=" +
                          std::to_string(input_dim) + ", hidden=" + std::to_string(hidden) +
                          ", embed_dim=" + std::to_string(embed_dim) +
                          ", vocab_size=" + std::to_string(vocab_size) +
                          ", token_dim=" + std::to_string(token_dim) + ")");
  }
}

std::size_t parameter_count(const EncoderDims& d) {
  const auto n = [](int v) { return static_cast<std::size_t>(v); };
  return n(d.input_dim) * n(d.hidden) + n(d.hidden) + n(d.hidden) * n(d.embed_dim) +
         n(d.embed_dim) + n(d.vocab_size) * n(d.token_dim) + n(d.token_dim) * n(d.embed_dim) + 1;
}

std::size_t DualEncoderParams::parameter_count() const { return starft::parameter_count(dims); }

bool DualEncoderParams::operator==(const DualEncoderParams& other) const {
  if (!(dims == other.dims) || lineage != other.lineage || vocabulary != other.vocabulary) {
    return false;
  }
  // Bitwise, so NaN payloads and signed zeros count.
  const auto same = [](const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
  };
  return same(image_w1, other.image_w1) && same(image_b1, other.image_b1) &&
         same(image_w2, other.image_w2) && same(image_b2, other.image_b2) &&
         same(token_embedding, other.token_embedding) &&
         same(text_projection, other.text_projection) && same(head, other.head) &&
         std::memcmp(&log_temperature, &other.log_temperature, sizeof(double)) == 0;
}

DualEncoderParams init_params(const EncoderDims& dims, std::uint64_t seed,
                              double initial_temperature) {
  dims.validate();
  if (!(initial_temperature > 0.0)) throw ValidationError("initial temperature must be positive");
  std::mt19937_64 rng(seed);
  const auto uniform = [&rng](int rows, int cols, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = dist(rng);
    return m;
  };
  DualEncoderParams p;
  p.dims = dims;
  p.image_w1 = uniform(dims.input_dim, dims.hidden, dims.input_dim);
  p.image_b1 = uniform(1, dims.hidden, dims.input_dim);
  p.image_w2 = uniform(dims.hidden, dims.embed_dim, dims.hidden);
  p.image_b2 = uniform(1, dims.embed_dim, dims.hidden);
  p.token_embedding = uniform(dims.vocab_size, dims.token_dim, dims.token_dim);
  p.text_projection = uniform(dims.token_dim, dims.embed_dim, dims.token_dim);
  p.log_temperature = std::log(initial_temperature);
  p.lineage.push_back("init:seed=" + std::to_string(seed));
  return p;
}

BoundParams bind(Tape& tape, const DualEncoderParams& p, bool trainable) {
  const auto leaf = [&](const Matrix& m) { return trainable ? tape.variable(m) : tape.constant(m); };
  BoundParams b;
  b.image_w1 = leaf(p.image_w1);
  b.image_b1 = leaf(p.image_b1);
  b.image_w2 = leaf(p.image_w2);
  b.image_b2 = leaf(p.image_b2);
  b.token_embedding = leaf(p.token_embedding);
  b.text_projection = leaf(p.text_projection);
  Matrix tau(1, 1);
  tau(0, 0) = p.log_temperature;
  b.log_temperature = leaf(tau);
  if (p.head.size() > 0) b.head = leaf(p.head);
  b.source = &p;
  return b;
}

DualEncoderParams collect_gradients(const Gradients& grads, const BoundParams& b) {
  DualEncoderParams g;
  g.dims = b.source->dims;
  g.image_w1 = grads.wrt(b.image_w1);
  g.image_b1 = grads.wrt(b.image_b1);
  g.image_w2 = grads.wrt(b.image_w2);
  g.image_b2 = grads.wrt(b.image_b2);
  g.token_embedding = grads.wrt(b.token_embedding);
  g.text_projection = grads.wrt(b.text_projection);
  g.log_temperature = grads.wrt(b.log_temperature)(0, 0);
  if (b.head.valid()) g.head = grads.wrt(b.head);
  return g;
}

Var encode_images(const BoundParams& p, const Matrix& features) {
  const Eigen::Index input_dim = p.image_w1.rows();
  if (features.cols() != input_dim) {
    throw DimensionError("encode_images: features have " + std::to_string(features.cols()) +
                         " columns, encoder expects input_dim=" + std::to_string(input_dim));
  }
  Tape& t = *p.image_w1.tape();
  const Var x = t.constant(features);
  const Var h = tanh(add_row_broadcast(matmul(x, p.image_w1), p.image_b1));
  const Var z = add_row_broadcast(matmul(h, p.image_w2), p.image_b2);
  return l2_normalize_rows(z);
}

namespace {

Matrix pooling_matrix(const std::vector<TokenSequence>& sequences, int vocab_size) {
  Matrix pool = Matrix::Zero(static_cast<Eigen::Index>(sequences.size()), vocab_size);
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const TokenSequence& seq = sequences[i];
    if (seq.empty()) throw ValidationError("encode_texts: empty token sequence at index " + std::to_string(i));
    for (int id : seq) {
      if (id < 0 || id >= vocab_size) {
        throw ValidationError("encode_texts: token id " + std::to_string(id) +
                              " outside vocabulary of size " + std::to_string(vocab_size));
      }
      pool(static_cast<Eigen::Index>(i), id) += 1.0;
    }
    pool.row(static_cast<Eigen::Index>(i)) /= static_cast<double>(seq.size());
  }
  return pool;
}

}  // namespace

Var encode_texts(const BoundParams& p, const std::vector<TokenSequence>& sequences) {
  if (sequences.empty()) throw DimensionError("encode_texts: no sequences");
  Tape& t = *p.token_embedding.tape();
  const Var pool = t.constant(pooling_matrix(sequences, static_cast<int>(p.token_embedding.rows())));
  const Var mean = matmul(pool, p.token_embedding);
  return l2_normalize_rows(matmul(mean, p.text_projection));
}

Var similarity_logits(const Var& images, const Var& texts, const Var& log_temperature) {
  return scale(matmul(images, transpose(texts)), exp(negate(log_temperature)));
}

Matrix encode_images(const DualEncoderParams& p, const Matrix& features) {
  Tape t;
  const BoundParams b = bind(t, p, false);
  return encode_images(b, features).value();
}

Matrix encode_texts(const DualEncoderParams& p, const std::vector<TokenSequence>& sequences) {
  Tape t;
  const BoundParams b = bind(t, p, false);
  return encode_texts(b, sequences).value();
}

Vector encode_image(const DualEncoderParams& p, const Vector& features) {
  return encode_images(p, Matrix(features.transpose())).row(0).transpose();
}

Vector encode_text(const DualEncoderParams& p, const TokenSequence& tokens) {
  return encode_texts(p, std::vector<TokenSequence>{tokens}).row(0).transpose();
}

Matrix similarity_logits(const Matrix& images, const Matrix& texts, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("similarity_logits: temperature must be positive");
  if (images.cols() != texts.cols()) {
    throw DimensionError("similarity_logits: embedding widths differ (" + shape_string(images) +
                         " vs " + shape_string(texts) + ")");
  }
  return images * texts.transpose() / temperature;
}

// ---- checkpoint -------------------------------------------------------------

namespace {

nlohmann::json matrix_to_json(const Eigen::Ref<const Matrix>& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols,
                        std::string_view name) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows) {
    throw ValidationError("checkpoint: tensor '" + std::string(name) + "' should have " +
                          std::to_string(rows) + " rows");
  }
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw ValidationError("checkpoint: tensor '" + std::string(name) + "' row " +
                            std::to_string(i) + " should have " + std::to_string(cols) +
                            " entries");
    }
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  require_finite(m, "checkpoint");
  return m;
}

}  // namespace

nlohmann::json params_to_json(const DualEncoderParams& p) {
  nlohmann::json j;
  j["format"] = "starft.dual_encoder";
  j["version"] = 1;
  j["dims"] = {{"input_dim", p.dims.input_dim},
               {"hidden", p.dims.hidden},
               {"embed_dim", p.dims.embed_dim},
               {"vocab_size", p.dims.vocab_size},
               {"token_dim", p.dims.token_dim}};
  j["lineage"] = p.lineage;
  j["vocabulary"] = p.vocabulary;
  nlohmann::json tensors = nlohmann::json::object();
  p.visit([&](std::string_view name, const Eigen::Ref<const Matrix>& m, bool) {
    tensors[std::string(name)] = matrix_to_json(m);
  });
  j["tensors"] = std::move(tensors);
  return j;
}

DualEncoderParams params_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "starft.dual_encoder") {
    throw ValidationError("checkpoint: missing or wrong 'format' (expected starft.dual_encoder)");
  }
  DualEncoderParams p;
  const auto& d = j.at("dims");
  p.dims.input_dim = d.at("input_dim").get<int>();
  p.dims.hidden = d.at("hidden").get<int>();
  p.dims.embed_dim = d.at("embed_dim").get<int>();
  p.dims.vocab_size = d.at("vocab_size").get<int>();
  p.dims.token_dim = d.at("token_dim").get<int>();
  p.dims.validate();
  p.lineage = j.value("lineage", std::vector<std::string>{});
  p.vocabulary = j.value("vocabulary", std::vector<std::string>{});
  if (!p.vocabulary.empty() && static_cast<int>(p.vocabulary.size()) != p.dims.vocab_size) {
    throw ValidationError("checkpoint: vocabulary has " + std::to_string(p.vocabulary.size()) +
                          " entries but vocab_size is " + std::to_string(p.dims.vocab_size));
  }
  const auto& t = j.at("tensors");
  const EncoderDims& k = p.dims;
  p.image_w1 = matrix_from_json(t.at("image_w1"), k.input_dim, k.hidden, "image_w1");
  p.image_b1 = matrix_from_json(t.at("image_b1"), 1, k.hidden, "image_b1");
  p.image_w2 = matrix_from_json(t.at("image_w2"), k.hidden, k.embed_dim, "image_w2");
  p.image_b2 = matrix_from_json(t.at("image_b2"), 1, k.embed_dim, "image_b2");
  p.token_embedding = matrix_from_json(t.at("token_embedding"), k.vocab_size, k.token_dim, "token_embedding");
  p.text_projection = matrix_from_json(t.at("text_projection"), k.token_dim, k.embed_dim, "text_projection");
  p.log_temperature = matrix_from_json(t.at("log_temperature"), 1, 1, "log_temperature")(0, 0);
  if (t.contains("head")) {
    const auto& h = t.at("head");
    if (!h.is_array() || h.empty()) throw ValidationError("checkpoint: tensor 'head' is empty");
    p.head = matrix_from_json(h, static_cast<Eigen::Index>(h.size()), k.embed_dim, "head");
  }
  return p;
}

}  // namespace starft
