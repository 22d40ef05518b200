#include "advdiff/metrics.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "advdiff/recognition.hpp"

namespace advdiff {

namespace {

std::vector<double> grayscale(const ImageSample& x) {
  const int c = x.channels();
  const std::size_t plane = static_cast<std::size_t>(x.height()) * x.width();
  std::vector<double> g(plane, 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < plane; ++i) g[i] += x.pixels[ch * plane + i];
  for (double& v : g) v /= c;
  return g;
}

std::vector<double> gaussian_window() {
  std::vector<double> w(kSsimWindow);
  const double mid = (kSsimWindow - 1) / 2.0;
  double total = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    w[static_cast<std::size_t>(i)] = std::exp(-(i - mid) * (i - mid) / (2.0 * kSsimSigma * kSsimSigma));
    total += w[static_cast<std::size_t>(i)];
  }
  for (double& v : w) v /= total;
  return w;
}

// Throws unless the covariance-like matrix is PSD up to a relative tolerance;
// returns its principal square root with small negative eigenvalues clipped.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
  Eigen::VectorXd values = eig.eigenvalues();
  const double tol = 1e-8 * std::max(1.0, values.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if (values(i) < -tol) {
      throw std::runtime_error("frechet_distance: matrix not positive semidefinite (eigenvalue " +
                               std::to_string(values(i)) + ")");
    }
    values(i) = std::sqrt(std::max(0.0, values(i)));
  }
  return eig.eigenvectors() * values.asDiagonal() * eig.eigenvectors().transpose();
}

Eigen::MatrixXd to_matrix(const FeatureSet& set, const char* which) {
  if (set.empty()) throw std::invalid_argument(std::string("frechet_distance: empty set ") + which);
  const std::size_t d = set.front().size();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(set.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set[i].size() != d) throw std::invalid_argument("frechet_distance: ragged feature set");
    for (std::size_t j = 0; j < d; ++j) {
      if (!std::isfinite(set[i][j])) throw std::invalid_argument("frechet_distance: non-finite feature");
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = set[i][j];
    }
  }
  if (set.size() < 2 * d) {
    throw std::invalid_argument(std::string("frechet_distance: set ") + which + " has " +
                                std::to_string(set.size()) + " samples, need at least " +
                                std::to_string(2 * d));
  }
  return m;
}

}  // namespace

double psnr(const ImageSample& a, const ImageSample& b) {
  require_same_shape(a.pixels, b.pixels, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.pixels.size());
  if (mse <= 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(1.0 / mse));
}

double ssim(const ImageSample& a, const ImageSample& b) {
  require_same_shape(a.pixels, b.pixels, "ssim");
  const int h = a.height(), w = a.width();
  if (h < kSsimWindow || w < kSsimWindow) {
    throw std::invalid_argument("ssim: image smaller than the " + std::to_string(kSsimWindow) +
                                "x" + std::to_string(kSsimWindow) + " window");
  }
  const std::vector<double> ga = grayscale(a), gb = grayscale(b);
  const std::vector<double> win = gaussian_window();
  double total = 0.0;
  int windows = 0;
  for (int y0 = 0; y0 + kSsimWindow <= h; ++y0) {
    for (int x0 = 0; x0 + kSsimWindow <= w; ++x0) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int dy = 0; dy < kSsimWindow; ++dy) {
        for (int dx = 0; dx < kSsimWindow; ++dx) {
          const double wt = win[static_cast<std::size_t>(dy)] * win[static_cast<std::size_t>(dx)];
          const std::size_t k = static_cast<std::size_t>(y0 + dy) * w + (x0 + dx);
          ma += wt * ga[k];
          mb += wt * gb[k];
          saa += wt * ga[k] * ga[k];
          sbb += wt * gb[k] * gb[k];
          sab += wt * ga[k] * gb[k];
        }
      }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
      total += ((2 * ma * mb + kSsimC1) * (2 * cov + kSsimC2)) /
               ((ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2));
      ++windows;
    }
  }
  return total / windows;
}

double frechet_distance(const FeatureSet& a, const FeatureSet& b) {
  const Eigen::MatrixXd ma = to_matrix(a, "a");
  const Eigen::MatrixXd mb = to_matrix(b, "b");
  if (ma.cols() != mb.cols()) throw std::invalid_argument("frechet_distance: feature dims differ");
  const Eigen::VectorXd mu_a = ma.colwise().mean();
  const Eigen::VectorXd mu_b = mb.colwise().mean();
  const Eigen::MatrixXd ca = ma.rowwise() - mu_a.transpose();
  const Eigen::MatrixXd cb = mb.rowwise() - mu_b.transpose();
  const Eigen::MatrixXd cov_a = ca.transpose() * ca / static_cast<double>(ma.rows() - 1);
  const Eigen::MatrixXd cov_b = cb.transpose() * cb / static_cast<double>(mb.rows() - 1);
  const Eigen::MatrixXd root_a = psd_sqrt(cov_a);
  const Eigen::MatrixXd cross = psd_sqrt(root_a * cov_b * root_a);
  const double d = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
  return std::max(0.0, d);
}

double acceptance_rate(std::span<const double> scores, double tau) {
  if (scores.empty()) throw std::invalid_argument("acceptance_rate: no scores");
  std::size_t hits = 0;
  for (double s : scores) hits += s > tau ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

double asr(std::span<const AdversarialPair> pairs, const Recognizer& r) {
  if (pairs.empty()) throw std::invalid_argument("asr: empty adversarial set");
  if (!r.threshold()) throw std::invalid_argument("asr: recognizer " + r.name() + " is not calibrated");
  std::vector<double> scores;
  scores.reserve(pairs.size());
  for (const auto& p : pairs) scores.push_back(similarity(r.embed(p.adversarial), r.embed(p.target)));
  return acceptance_rate(scores, r.threshold()->tau);
}

void MetricsReport::validate() const {
  for (const auto& [name, v] : asr_per_model)
    if (!(v >= 0.0 && v <= 1.0)) throw std::logic_error("ASR outside [0,1] for " + name);
  if (!std::isnan(frechet_distance) && !(frechet_distance >= 0.0))
    throw std::logic_error("negative Frechet distance");
  if (n_samples <= 0) throw std::logic_error("metrics report without samples");
}

nlohmann::json MetricsReport::to_json() const {
  return {{"method", method},
          {"black_box_model", black_box_model},
          {"asr_per_model", asr_per_model},
          {"white_box_asr", white_box_asr},
          {"psnr_mean_db", psnr_mean},
          {"psnr_reference", "adversarial vs source"},
          {"ssim_mean", ssim_mean},
          {"fd_toy", std::isnan(frechet_distance) ? nlohmann::json(nullptr) : nlohmann::json(frechet_distance)},
          {"n_samples", n_samples},
          {"n_failed", n_failed},
          {"config_fingerprint", config_fingerprint}};
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.method = j.at("method");
  r.black_box_model = j.at("black_box_model");
  r.asr_per_model = j.at("asr_per_model").get<std::map<std::string, double>>();
  r.white_box_asr = j.at("white_box_asr");
  r.psnr_mean = j.at("psnr_mean_db");
  r.ssim_mean = j.at("ssim_mean");
  r.frechet_distance = j.at("fd_toy").is_null() ? std::nan("") : j.at("fd_toy").get<double>();
  r.n_samples = j.at("n_samples");
  r.n_failed = j.value("n_failed", 0);
  r.config_fingerprint = j.at("config_fingerprint");
  return r;
}

std::string MetricsReport::csv_header() const {
  std::ostringstream out;
  out << "method,black_box_model";
  for (const auto& [name, v] : asr_per_model) out << ",asr_" << name;
  out << ",white_box_asr,psnr_db,ssim,fd_toy,n_samples,n_failed,config_fingerprint";
  return out.str();
}

std::string MetricsReport::csv_row() const {
  std::ostringstream out;
  out.precision(10);
  out << method << ',' << black_box_model;
  for (const auto& [name, v] : asr_per_model) out << ',' << v;
  out << ',' << white_box_asr << ',' << psnr_mean << ',' << ssim_mean << ',' << frechet_distance
      << ',' << n_samples << ',' << n_failed << ',' << config_fingerprint;
  return out.str();
}

}  // namespace advdiff
