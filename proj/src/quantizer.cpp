#include "revcal/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "revcal/error.hpp"

namespace revcal {

std::string to_string(QuantMethod m) { return m == QuantMethod::codebook_kmeans ? "codebook_kmeans" : "uniform_affine"; }

QuantMethod parse_quant_method(const std::string& s) {
  if (s == "codebook_kmeans" || s == "codebook" || s == "kmeans") return QuantMethod::codebook_kmeans;
  if (s == "uniform_affine" || s == "uniform") return QuantMethod::uniform_affine;
  fail("unknown quantization method '" + s + "' (expected codebook_kmeans or uniform_affine)");
}

void QuantConfig::validate() const {
  if (bits < 1 || bits > 16) fail("quantize: bits must be in [1, 16], got " + std::to_string(bits));
  if (!per_layer) fail("quantize: only per-layer quantization is supported");
  if (kmeans_iters == 0) fail("quantize: kmeans_iters must be positive");
}

std::size_t distinct_values(const Tensor& t) {
  std::vector<double> v = t.data;
  std::sort(v.begin(), v.end());
  return static_cast<std::size_t>(std::unique(v.begin(), v.end()) - v.begin());
}

namespace {

// Index of the nearest entry of an ascending codebook; ties go to the lower entry.
std::size_t nearest(const std::vector<double>& codebook, double w) {
  auto it = std::lower_bound(codebook.begin(), codebook.end(), w);
  if (it == codebook.begin()) return 0;
  if (it == codebook.end()) return codebook.size() - 1;
  const std::size_t hi = static_cast<std::size_t>(it - codebook.begin());
  return (w - codebook[hi - 1] <= codebook[hi] - w) ? hi - 1 : hi;
}

std::vector<double> kmeans_1d(const std::vector<double>& w, std::size_t k, std::size_t iters, double lo, double hi) {
  std::vector<double> c(k);
  for (std::size_t i = 0; i < k; ++i)
    c[i] = k == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(k - 1);
  c.back() = hi;

  std::vector<double> sum(k), cmin(k), cmax(k);
  std::vector<std::size_t> count(k);
  for (std::size_t it = 0; it < iters; ++it) {
    std::sort(c.begin(), c.end());
    std::fill(sum.begin(), sum.end(), 0.0);
    std::fill(count.begin(), count.end(), 0);
    std::fill(cmin.begin(), cmin.end(), std::numeric_limits<double>::infinity());
    std::fill(cmax.begin(), cmax.end(), -std::numeric_limits<double>::infinity());
    for (double v : w) {
      const std::size_t j = nearest(c, v);
      sum[j] += v;
      ++count[j];
      cmin[j] = std::min(cmin[j], v);
      cmax[j] = std::max(cmax[j], v);
    }
    std::vector<double> next(k);
    for (std::size_t j = 0; j < k; ++j) next[j] = count[j] ? std::clamp(sum[j] / static_cast<double>(count[j]), lo, hi) : c[j];
    for (std::size_t j = 0; j < k; ++j) {
      if (count[j]) continue;
      std::size_t widest = k;
      for (std::size_t q = 0; q < k; ++q)
        if (count[q] > 1 && (widest == k || cmax[q] - cmin[q] > cmax[widest] - cmin[widest])) widest = q;
      if (widest == k) break;
      next[j] = 0.5 * (cmin[widest] + cmax[widest]);
      cmax[widest] = cmin[widest];  // do not split the same interval twice
    }
    const bool moved = next != c;
    c = std::move(next);
    if (!moved) break;
  }
  std::sort(c.begin(), c.end());
  c.erase(std::unique(c.begin(), c.end()), c.end());
  return c;
}

}  // namespace

QuantizedLayer quantize_layer(const Tensor& weights, const QuantConfig& cfg) {
  cfg.validate();
  if (weights.data.empty()) fail("quantize: empty tensor");
  if (!weights.all_finite()) fail_numeric("quantize: weights contain non-finite values");
  const auto [pmin, pmax] = std::minmax_element(weights.data.begin(), weights.data.end());
  const double lo = *pmin, hi = *pmax;
  const std::size_t k = std::size_t{1} << cfg.bits;

  QuantizedLayer out;
  out.values = Tensor(weights.shape, weights.data);
  if (cfg.method == QuantMethod::codebook_kmeans) {
    std::vector<double> uniq = weights.data;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    if (uniq.size() <= k) {
      out.codebook = std::move(uniq);
      return out;
    }
    out.codebook = kmeans_1d(weights.data, k, cfg.kmeans_iters, lo, hi);
  } else {
    if (lo == hi) {
      out.codebook = {lo};
      return out;
    }
    const double scale = (hi - lo) / static_cast<double>(k - 1);
    out.codebook.resize(k);
    for (std::size_t i = 0; i + 1 < k; ++i) out.codebook[i] = lo + static_cast<double>(i) * scale;
    out.codebook.back() = hi;
    for (double& v : out.values.data) {
      const double pos = std::round((v - lo) / scale);
      v = out.codebook[static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(k - 1)))];
    }
    return out;
  }
  for (double& v : out.values.data) v = out.codebook[nearest(out.codebook, v)];
  return out;
}

Model quantize_model(const Model& model, const QuantConfig& cfg) {
  cfg.validate();
  std::vector<Param> params;
  QuantRecord rec;
  rec.bits = cfg.bits;
  rec.method = to_string(cfg.method);
  for (const auto& p : model.params()) {
    const bool is_weight = p.name.size() >= 7 && p.name.compare(p.name.size() - 7, 7, ".weight") == 0;
    if (!is_weight) {
      params.push_back({p.name, Tensor(p.tensor.shape, p.tensor.data)});
      continue;
    }
    QuantizedLayer q = quantize_layer(p.tensor, cfg);
    rec.codebooks[p.name] = std::move(q.codebook);
    params.push_back({p.name, std::move(q.values)});
  }
  Model out(model.name() + "-" + std::to_string(cfg.bits) + "bit", model.spec(), std::move(params));
  out.quantization = std::move(rec);
  out.freeze();
  return out;
}

}  // namespace revcal
