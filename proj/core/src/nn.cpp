#include "advdiff/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace advdiff::nn {

namespace {

constexpr char kMagic[4] = {'A', 'D', 'V', 'D'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint blob truncated");
  return v;
}

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace

std::size_t ParameterSet::add(std::string name, Tensor value) {
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

std::size_t ParameterSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  throw std::out_of_range("no parameter named " + name);
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

Bound bind(ag::Tape& tape, const ParameterSet& params, bool track) {
  Bound b;
  b.vars.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    b.vars.push_back(track ? tape.leaf(params[i]) : tape.constant(params[i]));
  return b;
}

std::vector<Tensor> gradients(const ag::Tape& tape, const Bound& bound) {
  std::vector<Tensor> out;
  out.reserve(bound.vars.size());
  for (const auto& v : bound.vars) out.push_back(tape.grad(v));
  return out;
}

void add_conv(ParameterSet& params, const std::string& name, int cin, int cout, int k,
              std::mt19937_64& rng, double gain) {
  const double fan_in = static_cast<double>(cin * k * k);
  params.add(name + ".weight", uniform({cout, cin, k, k}, gain * std::sqrt(6.0 / fan_in), rng));
  params.add(name + ".bias", Tensor({cout}));
}

void add_linear(ParameterSet& params, const std::string& name, int in, int out,
                std::mt19937_64& rng, double gain) {
  params.add(name + ".weight", uniform({out, in}, gain * std::sqrt(6.0 / in), rng));
  params.add(name + ".bias", Tensor({out}));
}

Adam::Adam(double learning_rate, double beta1, double beta2, double epsilon)
    : learning_rate_(learning_rate), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {}

void Adam::step(ParameterSet& params, const std::vector<Tensor>& grads) {
  if (grads.size() != params.size()) throw std::invalid_argument("Adam: gradient count mismatch");
  if (m_.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_.emplace_back(params[i].shape());
      v_.emplace_back(params[i].shape());
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    const Tensor& g = grads[i];
    require_same_shape(p, g, "Adam step");
    for (std::size_t j = 0; j < p.size(); ++j) {
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
      p[j] -= learning_rate_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + epsilon_);
    }
  }
}

double global_norm(const std::vector<Tensor>& grads) {
  double ss = 0.0;
  for (const auto& g : grads)
    for (double v : g.data()) ss += v * v;
  return std::sqrt(ss);
}

void clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm && norm > 0.0) {
    for (auto& g : grads) g *= max_norm / norm;
  }
}

void save_blob(const std::filesystem::path& path, const ParameterSet& params) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kMagic, 4);
  write_pod(out, kVersion);
  write_pod(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    write_pod(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Tensor& t = params[i];
    write_pod(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) write_pod(out, static_cast<std::int32_t>(d));
    out.write(reinterpret_cast<const char*>(t.ptr()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

ParameterSet load_blob(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error(path.string() + " is not a checkpoint blob");
  if (read_pod<std::uint32_t>(in) != kVersion)
    throw std::runtime_error(path.string() + ": unsupported blob version");
  const auto count = read_pod<std::uint32_t>(in);
  ParameterSet params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = read_pod<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto rank = read_pod<std::uint32_t>(in);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(read_pod<std::int32_t>(in));
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint blob truncated: " + path.string());
    params.add(std::move(name), std::move(t));
  }
  return params;
}

}  // namespace advdiff::nn
