#include "relrisk/tensor.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace relrisk {

namespace {

constexpr char kCkptMagic[8] = {'R', 'R', 'C', 'K', 'P', 'T', '0', '1'};
constexpr uint32_t kCkptVersion = 1;

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint file: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return buf;
}

void write_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint file: " + path);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw DataError("failed writing checkpoint file: " + path);
}

}  // namespace

void Adam::step(std::vector<Param>& params, const std::vector<std::vector<float>>& grads) {
  if (grads.size() != params.size()) throw std::logic_error("Adam::step: gradient count mismatch");
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t p = 0; p < params.size(); ++p) {
      m_[p].assign(params[p].size(), 0.0f);
      v_[p].assign(params[p].size(), 0.0f);
    }
  }
  if (m_.size() != params.size()) throw std::logic_error("Adam::step: parameter count changed");
  ++t_;
  const double b1 = double(beta1), b2 = double(beta2);
  const double bc1 = 1.0 - std::pow(b1, double(t_));
  const double bc2 = 1.0 - std::pow(b2, double(t_));
  for (size_t p = 0; p < params.size(); ++p) {
    auto& value = params[p].value;
    const auto& g = grads[p];
    if (g.size() != value.size()) throw std::logic_error("Adam::step: gradient size mismatch");
    auto& m = m_[p];
    auto& v = v_[p];
    for (size_t i = 0; i < value.size(); ++i) {
      const double gi = double(g[i]);
      const double mi = b1 * double(m[i]) + (1.0 - b1) * gi;
      const double vi = b2 * double(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = float(mi);
      v[i] = float(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      value[i] = float(double(value[i]) - double(lr) * mhat / (std::sqrt(vhat) + double(eps)));
    }
  }
}

void Checkpoint::add(const std::string& name, std::vector<size_t> shape,
                     std::vector<float> data) {
  size_t expect = 1;
  for (size_t d : shape) expect *= d;
  if (shape.empty()) expect = 0;
  if (expect != data.size()) throw std::logic_error("Checkpoint::add: shape/data mismatch");
  for (const auto& a : arrays) {
    if (a.name == name) throw std::logic_error("Checkpoint::add: duplicate array name " + name);
  }
  arrays.push_back(Array{name, std::move(shape), std::move(data)});
}

const Checkpoint::Array& Checkpoint::get(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw DataError("checkpoint has no array named: " + name);
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return true;
  }
  return false;
}

void Checkpoint::save(const std::string& path_base) const {
  nlohmann::json manifest;
  manifest["format"] = "relrisk-checkpoint";
  manifest["version"] = kCkptVersion;
  manifest["arrays"] = nlohmann::json::array();

  std::string bin(kCkptMagic, sizeof(kCkptMagic));
  {
    uint32_t ver = kCkptVersion, pad = 0;
    bin.append(reinterpret_cast<const char*>(&ver), sizeof(ver));
    bin.append(reinterpret_cast<const char*>(&pad), sizeof(pad));
  }
  for (const auto& a : arrays) {
    nlohmann::json entry;
    entry["name"] = a.name;
    entry["shape"] = a.shape;
    entry["offset"] = bin.size();
    entry["count"] = a.data.size();
    manifest["arrays"].push_back(entry);
    bin.append(reinterpret_cast<const char*>(a.data.data()), a.data.size() * sizeof(float));
  }
  write_file(path_base + ".bin", bin);
  write_file(path_base + ".json", manifest.dump(2) + "\n");
}

Checkpoint Checkpoint::load(const std::string& path_base) {
  const std::string bin = slurp(path_base + ".bin");
  if (bin.size() < sizeof(kCkptMagic) + 8 ||
      std::memcmp(bin.data(), kCkptMagic, sizeof(kCkptMagic)) != 0) {
    throw DataError("bad magic in checkpoint file: " + path_base + ".bin");
  }
  uint32_t ver = 0;
  std::memcpy(&ver, bin.data() + sizeof(kCkptMagic), sizeof(ver));
  if (ver != kCkptVersion) throw DataError("unsupported checkpoint version in " + path_base);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(slurp(path_base + ".json"));
  } catch (const nlohmann::json::exception&) {
    throw DataError("invalid checkpoint manifest: " + path_base + ".json");
  }
  if (manifest.value("format", "") != "relrisk-checkpoint" || !manifest.contains("arrays")) {
    throw DataError("invalid checkpoint manifest: " + path_base + ".json");
  }

  Checkpoint ckpt;
  for (const auto& entry : manifest["arrays"]) {
    Array a;
    a.name = entry.at("name").get<std::string>();
    a.shape = entry.at("shape").get<std::vector<size_t>>();
    const size_t offset = entry.at("offset").get<size_t>();
    const size_t count = entry.at("count").get<size_t>();
    size_t expect = a.shape.empty() ? 0 : 1;
    for (size_t d : a.shape) expect *= d;
    if (expect != count) throw DataError("checkpoint manifest shape mismatch for " + a.name);
    if (offset > bin.size() || count > (bin.size() - offset) / sizeof(float)) {
      throw DataError("truncated checkpoint file: " + path_base + ".bin");
    }
    a.data.resize(count);
    std::memcpy(a.data.data(), bin.data() + offset, count * sizeof(float));
    ckpt.arrays.push_back(std::move(a));
  }
  return ckpt;
}

Checkpoint Checkpoint::from_params(const std::vector<Param>& params) {
  Checkpoint ckpt;
  for (const auto& p : params) ckpt.add(p.name, {p.rows, p.cols}, p.value);
  return ckpt;
}

void Checkpoint::to_params(std::vector<Param>& params) const {
  for (auto& p : params) {
    const Array& a = get(p.name);
    if (a.shape.size() != 2 || a.shape[0] != p.rows || a.shape[1] != p.cols) {
      throw DataError("checkpoint array shape mismatch for: " + p.name);
    }
    p.value = a.data;
  }
}

GradCheckResult grad_check(
    std::vector<GradCheckParam> params,
    const std::function<int(Tape<double>&, const std::vector<int>&)>& build, double eps) {
  auto run = [&](double* out_loss, std::vector<std::vector<double>>* out_grads) {
    Tape<double> tape;
    std::vector<int> ids;
    ids.reserve(params.size());
    for (const auto& p : params) ids.push_back(tape.input(p.rows, p.cols, p.value));
    const int loss = build(tape, ids);
    if (tape.rows(loss) != 1 || tape.cols(loss) != 1) {
      throw std::logic_error("grad_check: build must return a scalar loss");
    }
    *out_loss = tape.val(loss)[0];
    if (out_grads) {
      tape.backward(loss);
      out_grads->clear();
      for (int id : ids) out_grads->push_back(tape.grad(id));
    }
  };

  double base_loss = 0.0;
  std::vector<std::vector<double>> analytic;
  run(&base_loss, &analytic);

  GradCheckResult result;
  for (size_t p = 0; p < params.size(); ++p) {
    for (size_t i = 0; i < params[p].value.size(); ++i) {
      const double saved = params[p].value[i];
      params[p].value[i] = saved + eps;
      double f_plus = 0.0;
      run(&f_plus, nullptr);
      params[p].value[i] = saved - eps;
      double f_minus = 0.0;
      run(&f_minus, nullptr);
      params[p].value[i] = saved;

      const double fd = (f_plus - f_minus) / (2.0 * eps);
      const double an = analytic[p][i];
      const double rel = std::abs(an - fd) / std::max(std::abs(an) + std::abs(fd), 1e-6);
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_param = params[p].name;
        result.worst_index = i;
        result.analytic = an;
        result.numeric = fd;
      }
    }
  }
  return result;
}

}  // namespace relrisk
