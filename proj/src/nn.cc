#include "dymo/nn.h"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "dymo/errors.h"

namespace dymo {

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

Tensor& ParameterStore::add(const std::string& name, Tensor value) {
  if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
  index_.emplace(name, count());
  names_.push_back(name);
  values_.push_back(std::move(value));
  return values_.back();
}

int ParameterStore::index(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InputError("unknown parameter " + name);
  return it->second;
}

Tensor& ParameterStore::get(const std::string& name) { return values_[static_cast<size_t>(index(name))]; }
const Tensor& ParameterStore::get(const std::string& name) const { return values_[static_cast<size_t>(index(name))]; }

size_t ParameterStore::scalar_count() const {
  size_t n = 0;
  for (const Tensor& t : values_) n += t.size();
  return n;
}

bool operator==(const ParameterStore& a, const ParameterStore& b) {
  if (a.names_ != b.names_) return false;
  for (size_t i = 0; i < a.values_.size(); ++i) {
    if (a.values_[i].shape() != b.values_[i].shape()) return false;
    if (std::memcmp(a.values_[i].raw(), b.values_[i].raw(), a.values_[i].size() * sizeof(double)) != 0) return false;
  }
  return true;
}

BoundParams::BoundParams(ad::Tape& tape, const ParameterStore& store, bool trainable) : store_(&store) {
  vars_.reserve(static_cast<size_t>(store.count()));
  for (int i = 0; i < store.count(); ++i) {
    vars_.push_back(trainable ? tape.variable(store.value(i)) : tape.constant(store.value(i)));
  }
}

std::vector<Tensor> BoundParams::grads() const {
  std::vector<Tensor> out;
  out.reserve(vars_.size());
  for (const ad::Var& v : vars_) out.push_back(v.grad());
  return out;
}

Tensor init_normal(std::vector<int> shape, int fan_in, std::mt19937_64& rng, double gain) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, std::sqrt(gain / fan_in));
  for (double& v : t.data()) v = n(rng);
  return t;
}

double Adam::step(ParameterStore& params, const std::vector<Tensor>& grads, double lr_scale) {
  if (static_cast<int>(grads.size()) != params.count()) throw InputError("Adam: gradient count mismatch");
  if (m_.empty()) {
    for (int i = 0; i < params.count(); ++i) {
      m_.push_back(Tensor::like(params.value(i)));
      v_.push_back(Tensor::like(params.value(i)));
    }
  }
  double sq = 0.0;
  for (const Tensor& g : grads) sq += dot(g.data(), g.data());
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericalError("Adam: non-finite gradient");
  const double clip = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
  const double lr = cfg_.lr * lr_scale;
  for (int i = 0; i < params.count(); ++i) {
    Tensor& p = params.value(i);
    Tensor& m = m_[static_cast<size_t>(i)];
    Tensor& v = v_[static_cast<size_t>(i)];
    const Tensor& g = grads[static_cast<size_t>(i)];
    for (size_t k = 0; k < p.size(); ++k) {
      const double gk = g[k] * clip;
      m[k] = cfg_.beta1 * m[k] + (1 - cfg_.beta1) * gk;
      v[k] = cfg_.beta2 * v[k] + (1 - cfg_.beta2) * gk * gk;
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.eps);
    }
  }
  return norm;
}

namespace {
constexpr char kMagic[8] = {'D', 'Y', 'M', 'O', 'C', 'K', 'P', 'T'};
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::json header;
  header["kind"] = ckpt.kind;
  header["config"] = ckpt.config;
  header["vocabulary"] = ckpt.vocabulary;
  header["metadata"] = ckpt.metadata;
  nlohmann::json table = nlohmann::json::array();
  size_t offset = 0;
  for (int i = 0; i < ckpt.params.count(); ++i) {
    const Tensor& t = ckpt.params.value(i);
    table.push_back({{"name", ckpt.params.name(i)}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size();
  }
  header["tensors"] = table;
  const std::string text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw InputError("cannot write " + tmp);
    const uint32_t version = Checkpoint::kFormatVersion;
    const uint64_t len = text.size();
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (int i = 0; i < ckpt.params.count(); ++i) {
      const Tensor& t = ckpt.params.value(i);
      out.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path);
  char magic[8];
  uint32_t version = 0;
  uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw FormatError(path + " is not a checkpoint");
  if (version != Checkpoint::kFormatVersion) {
    throw FormatError(path + ": checkpoint format version " + std::to_string(version) + ", expected " +
                      std::to_string(Checkpoint::kFormatVersion));
  }
  if (len > (1u << 26)) throw FormatError(path + ": header too large");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  Checkpoint ckpt;
  try {
    const auto header = nlohmann::json::parse(text);
    ckpt.kind = header.at("kind");
    ckpt.config = header.at("config");
    ckpt.vocabulary = header.at("vocabulary");
    ckpt.metadata = header.at("metadata");
    for (const auto& entry : header.at("tensors")) {
      Tensor t(entry.at("shape").get<std::vector<int>>());
      in.read(reinterpret_cast<char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(double)));
      ckpt.params.add(entry.at("name"), std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad checkpoint header: " + e.what());
  }
  if (!in) throw FormatError(path + ": truncated checkpoint");
  return ckpt;
}

}  // namespace dymo
