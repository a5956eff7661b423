#pragma once

// On-disk formats: weight checkpoints (flat little-endian binary + JSON
// sidecar), correlation estimates (binary matrix payloads + JSON metadata),
// and JSON emission for bound reports and scatter summaries.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bounds.hpp"
#include "simulation.hpp"
#include "json.hpp"

namespace s2o {

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, sizeof(bits));
  write_u64(os, bits);
}

struct BinReader {
  std::istream& is;
  std::string path;
  std::size_t offset = 0;

  void take(void* dst, std::size_t n) {
    is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) {
      std::ostringstream os;
      os << path << ": truncated at offset " << offset << " (wanted " << n << " bytes)";
      throw IoError(os.str());
    }
    offset += n;
  }

  std::uint32_t u32() {
    unsigned char b[4];
    take(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    unsigned char b[8];
    take(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }
};

inline void write_matrix(std::ostream& os, const Tensor& t) {
  for (double v : t.data) write_f64(os, v);
}

inline Tensor read_matrix(BinReader& r, std::size_t rows, std::size_t cols) {
  Tensor t = Tensor::zeros({rows, cols});
  for (double& v : t.data) v = r.f64();
  return t;
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointMagic = 0x53324F57;  // "S2OW"
inline constexpr std::uint32_t kEstimateMagic = 0x53324F45;    // "S2OE"
inline constexpr std::uint32_t kFormatVersion = 1;

// Binary layout: magic, version, activation, dim count, dims (u64 each), then
// each layer's row-major doubles. Sidecar written next to it as <path>.json.
inline void save_checkpoint(const std::string& path, const MlpNetwork& net,
                            const nlohmann::json& sidecar = {}) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(path + ": cannot open for writing");
  detail::write_u32(os, kCheckpointMagic);
  detail::write_u32(os, kFormatVersion);
  std::uint32_t act = 0;
  switch (net.activation) {
    case Activation::relu: act = 0; break;
    case Activation::tanh: act = 1; break;
    case Activation::linear: act = 2; break;
  }
  detail::write_u32(os, act);
  detail::write_u32(os, static_cast<std::uint32_t>(net.dims.size()));
  for (std::size_t d : net.dims) detail::write_u64(os, d);
  for (const Tensor& w : net.weights) detail::write_matrix(os, w);
  if (!os) throw IoError(path + ": write failed");
  os.close();

  nlohmann::json meta = sidecar;
  meta["format"] = "weight-checkpoint";
  meta["version"] = kFormatVersion;
  meta["activation"] = activation_name(net.activation);
  meta["dims"] = net.dims;
  std::ofstream js(path + ".json", std::ios::trunc);
  if (!js) throw IoError(path + ".json: cannot open for writing");
  js << meta.dump(2) << "\n";
}

inline MlpNetwork load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path + ": cannot open");
  detail::BinReader r{is, path};
  const std::uint32_t magic = r.u32();
  if (magic != kCheckpointMagic) {
    std::ostringstream os;
    os << path << ": wrong magic 0x" << std::hex << magic << " (expected weight checkpoint)";
    throw IoError(os.str());
  }
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion) {
    std::ostringstream os;
    os << path << ": unsupported version " << version;
    throw IoError(os.str());
  }
  const std::uint32_t act = r.u32();
  if (act > 2) throw IoError(path + ": unknown activation code");
  const std::uint32_t nd = r.u32();
  if (nd < 2) throw IoError(path + ": needs at least 2 layer dims");
  MlpNetwork net;
  net.activation = act == 0 ? Activation::relu : (act == 1 ? Activation::tanh : Activation::linear);
  net.dims.reserve(nd);
  for (std::uint32_t i = 0; i < nd; ++i) net.dims.push_back(r.u64());
  for (std::uint32_t l = 0; l + 1 < nd; ++l) {
    Tensor w = detail::read_matrix(r, net.dims[l + 1], net.dims[l]);
    w.requires_grad = true;
    net.weights.push_back(std::move(w));
  }
  return net;
}

// Estimate container: scalars and layout in a JSON sidecar, matrices in a
// flat binary with per-layer flags (bit0 dense, bit1 factors, bit2
// degenerate). Matrix order per layer: [dense | row_factor col_factor],
// r_prime, r_dprime.
inline void save_estimate(const std::string& path, const CorrelationEstimate& est) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(path + ": cannot open for writing");
  detail::write_u32(os, kEstimateMagic);
  detail::write_u32(os, kFormatVersion);
  detail::write_u32(os, est.estimator == EstimatorTag::sampling ? 0u : 1u);
  detail::write_u32(os, est.domain == DomainTag::clean ? 0u : 1u);
  detail::write_u64(os, est.seed);
  detail::write_u32(os, static_cast<std::uint32_t>(est.layers.size()));
  for (const LayerCorrelation& lc : est.layers) {
    detail::write_u64(os, lc.rows);
    detail::write_u64(os, lc.cols);
    std::uint32_t flags = 0;
    if (lc.dense) flags |= 1u;
    if (lc.row_factor && lc.col_factor) flags |= 2u;
    if (lc.degenerate) flags |= 4u;
    detail::write_u32(os, flags);
    detail::write_f64(os, lc.sigma);
    detail::write_f64(os, lc.log_det_r);
    if (lc.dense) detail::write_matrix(os, *lc.dense);
    if (lc.row_factor && lc.col_factor) {
      detail::write_matrix(os, *lc.row_factor);
      detail::write_matrix(os, *lc.col_factor);
    }
    detail::write_matrix(os, lc.r_prime);
    detail::write_matrix(os, lc.r_dprime);
  }
  if (!os) throw IoError(path + ": write failed");
  os.close();

  nlohmann::json meta;
  meta["format"] = "correlation-estimate";
  meta["version"] = kFormatVersion;
  meta["estimator"] = estimator_name(est.estimator);
  meta["domain"] = domain_name(est.domain);
  meta["seed"] = est.seed;
  meta["vec_order"] = "row-major";
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerCorrelation& lc : est.layers) {
    layers.push_back({{"rows", lc.rows},
                      {"cols", lc.cols},
                      {"sigma", lc.sigma},
                      {"log_det_r", lc.log_det_r},
                      {"degenerate", lc.degenerate},
                      {"storage", lc.dense ? "dense" : "factored"}});
  }
  meta["layers"] = layers;
  std::ofstream js(path + ".json", std::ios::trunc);
  if (!js) throw IoError(path + ".json: cannot open for writing");
  js << meta.dump(2) << "\n";
}

inline CorrelationEstimate load_estimate(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path + ": cannot open");
  detail::BinReader r{is, path};
  const std::uint32_t magic = r.u32();
  if (magic != kEstimateMagic) {
    std::ostringstream os;
    os << path << ": wrong magic 0x" << std::hex << magic << " (expected correlation estimate)";
    throw IoError(os.str());
  }
  if (r.u32() != kFormatVersion) throw IoError(path + ": unsupported version");
  CorrelationEstimate est;
  est.estimator = r.u32() == 0 ? EstimatorTag::sampling : EstimatorTag::laplace;
  est.domain = r.u32() == 0 ? DomainTag::clean : DomainTag::adversarial;
  est.seed = r.u64();
  const std::uint32_t nl = r.u32();
  est.layers.reserve(nl);
  for (std::uint32_t l = 0; l < nl; ++l) {
    LayerCorrelation lc;
    lc.rows = r.u64();
    lc.cols = r.u64();
    const std::uint32_t flags = r.u32();
    lc.degenerate = (flags & 4u) != 0;
    lc.sigma = r.f64();
    lc.log_det_r = r.f64();
    const std::size_t d = lc.rows * lc.cols;
    if ((flags & 1u) != 0) lc.dense = detail::read_matrix(r, d, d);
    if ((flags & 2u) != 0) {
      lc.row_factor = detail::read_matrix(r, lc.rows, lc.rows);
      lc.col_factor = detail::read_matrix(r, lc.cols, lc.cols);
    }
    lc.r_prime = detail::read_matrix(r, lc.cols, lc.cols);
    lc.r_dprime = detail::read_matrix(r, lc.rows, lc.rows);
    est.layers.push_back(std::move(lc));
  }
  return est;
}

inline nlohmann::json bound_report_json(const BoundReport& rep) {
  nlohmann::json j;
  j["phi_adv"] = rep.phi;
  j["psi_adv"] = rep.psi;
  j["kl_term"] = rep.kl;
  j["kl_clean"] = rep.kl_clean;
  j["kl_adv"] = rep.kl_adv;
  j["complexity_term"] = rep.complexity;
  j["lambda_sum"] = rep.lambda_sum;
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < rep.lambdas.size(); ++l) {
    const LayerLambdas& ll = rep.lambdas[l];
    layers.push_back({{"lambda_prime_max", ll.lambda_prime_max},
                      {"lambda_dprime_max", ll.lambda_dprime_max},
                      {"lambda_min", ll.lambda_min},
                      {"lambda_max", ll.lambda_max},
                      {"k", rep.k_values[l]},
                      {"log_det_bound", rep.log_det_bounds[l]}});
  }
  j["layers"] = layers;
  j["metadata"] = {{"attack_kind", rep.attack_kind},
                   {"sigma_convention", rep.sigma_convention},
                   {"estimator", rep.estimator},
                   {"clean_domain", rep.clean_domain},
                   {"adv_domain", rep.adv_domain},
                   {"c1", rep.c1},
                   {"c2", rep.c2},
                   {"comparator_only", rep.comparator_only},
                   {"vec_order", "row-major"}};
  return j;
}

inline nlohmann::json scatter_summary_json(const ScatterResult& res) {
  nlohmann::json j;
  j["dim"] = res.dim;
  j["count"] = res.count;
  j["seed"] = res.seed;
  j["generator"] = res.generator;
  j["oversampling"] = 2;
  auto put = [&j](const char* key, const std::optional<double>& v) {
    if (v)
      j[key] = *v;
    else
      j[key] = "undefined (constant input)";
  };
  put("spearman_frob_vs_lambda_prime", res.spearman_lambda_prime);
  put("spearman_frob_vs_lambda_dprime", res.spearman_lambda_dprime);
  put("spearman_frob_vs_det_bound", res.spearman_det_bound);
  return j;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(path + ": cannot open for writing");
  os << content;
  if (!os) throw IoError(path + ": write failed");
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(path + ": cannot open");
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

}  // namespace s2o
