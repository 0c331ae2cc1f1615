#pragma once

#include <cstdint>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>

#include "attni2i/losses.hpp"
#include "attni2i/masks.hpp"
#include "attni2i/tensor.hpp"

namespace attni2i {

// Fully-resolved training run description. Serialized verbatim (key=value,
// one per line, fixed order) into the run directory and every checkpoint.
struct TrainingConfig {
  Scheme scheme = Scheme::MultiMask;
  int64_t n = 10;
  int64_t image_size = 256;
  int64_t crop_size = 256;
  int64_t batch_size = 1;
  int64_t total_steps = 0;
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double width = 1.0;
  double lambda_cycle = 10.0;
  double lambda_id = 0.5;
  double lambda_gan = 0.5;
  double lambda_pixel = 1.0;
  double lambda_tv = 1e-6;
  int64_t buffer_capacity = 50;
  uint64_t seed = 0;
  int64_t checkpoint_interval = 1000;
  int threads = 1;
  bool deterministic = false;
  bool augment = true;
  std::string data_root;
  std::string out_dir;

  template <typename T>
  LossWeights<T> weights() const {
    LossWeights<T> w;
    w.scheme = scheme;
    w.lambda_cycle = T(lambda_cycle);
    w.lambda_id = T(lambda_id);
    w.lambda_gan = T(lambda_gan);
    w.lambda_pixel = T(lambda_pixel);
    w.lambda_tv = T(lambda_tv);
    return w;
  }

  void validate() const {
    if (lr <= 0) throw ConfigError("config: lr must be positive");
    if (crop_size > image_size)
      throw ConfigError("config: crop_size must not exceed image_size");
    if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
    if (total_steps < 0) throw ConfigError("config: total_steps must be >= 0");
    if (scheme == Scheme::MultiMask && n < 2)
      throw ConfigError("config: multi-mask scheme needs n >= 2");
    weights<double>().validate();
  }

  std::string serialize() const {
    std::ostringstream os;
    char buf[64];
    auto real = [&buf](double v) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      return std::string(buf);
    };
    os << "scheme=" << int(scheme) << '\n';
    os << "n=" << n << '\n';
    os << "image_size=" << image_size << '\n';
    os << "crop_size=" << crop_size << '\n';
    os << "batch_size=" << batch_size << '\n';
    os << "total_steps=" << total_steps << '\n';
    os << "lr=" << real(lr) << '\n';
    os << "beta1=" << real(beta1) << '\n';
    os << "beta2=" << real(beta2) << '\n';
    os << "width=" << real(width) << '\n';
    os << "lambda_cycle=" << real(lambda_cycle) << '\n';
    os << "lambda_id=" << real(lambda_id) << '\n';
    os << "lambda_gan=" << real(lambda_gan) << '\n';
    os << "lambda_pixel=" << real(lambda_pixel) << '\n';
    os << "lambda_tv=" << real(lambda_tv) << '\n';
    os << "buffer_capacity=" << buffer_capacity << '\n';
    os << "seed=" << seed << '\n';
    os << "checkpoint_interval=" << checkpoint_interval << '\n';
    os << "threads=" << threads << '\n';
    os << "deterministic=" << (deterministic ? 1 : 0) << '\n';
    os << "augment=" << (augment ? 1 : 0) << '\n';
    os << "data_root=" << data_root << '\n';
    os << "out_dir=" << out_dir << '\n';
    return os.str();
  }

  static TrainingConfig deserialize(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty() || line[0] == '#') continue;
      const size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config: malformed line '" + line + "'");
      kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    TrainingConfig c;
    auto geti = [&kv](const char* k, int64_t dflt) {
      auto it = kv.find(k);
      return it == kv.end() ? dflt : int64_t(std::stoll(it->second));
    };
    auto getd = [&kv](const char* k, double dflt) {
      auto it = kv.find(k);
      return it == kv.end() ? dflt : std::stod(it->second);
    };
    auto gets = [&kv](const char* k, std::string dflt) {
      auto it = kv.find(k);
      return it == kv.end() ? dflt : it->second;
    };
    c.scheme = geti("scheme", 2) == 1 ? Scheme::SingleMask : Scheme::MultiMask;
    c.n = geti("n", c.n);
    c.image_size = geti("image_size", c.image_size);
    c.crop_size = geti("crop_size", c.crop_size);
    c.batch_size = geti("batch_size", c.batch_size);
    c.total_steps = geti("total_steps", c.total_steps);
    c.lr = getd("lr", c.lr);
    c.beta1 = getd("beta1", c.beta1);
    c.beta2 = getd("beta2", c.beta2);
    c.width = getd("width", c.width);
    c.lambda_cycle = getd("lambda_cycle", c.lambda_cycle);
    c.lambda_id = getd("lambda_id", c.lambda_id);
    c.lambda_gan = getd("lambda_gan", c.lambda_gan);
    c.lambda_pixel = getd("lambda_pixel", c.lambda_pixel);
    c.lambda_tv = getd("lambda_tv", c.lambda_tv);
    c.buffer_capacity = geti("buffer_capacity", c.buffer_capacity);
    c.seed = uint64_t(geti("seed", 0));
    c.checkpoint_interval = geti("checkpoint_interval", c.checkpoint_interval);
    c.threads = int(geti("threads", c.threads));
    c.deterministic = geti("deterministic", 0) != 0;
    c.augment = geti("augment", 1) != 0;
    c.data_root = gets("data_root", "");
    c.out_dir = gets("out_dir", "");
    return c;
  }
};

}  // namespace attni2i
