#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "attni2i/data.hpp"
#include "attni2i/runtime.hpp"
#include "attni2i/training.hpp"

namespace attni2i {

// One tab-separated record per optimization step (no header):
// step  g_adv  d_adv  agan  cycle  identity  pixel  tv  total  lr
inline std::string format_log_line(uint64_t step, const LossReport& r, double lr) {
  char buf[320];
  std::snprintf(buf, sizeof(buf),
                "%llu\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\n",
                static_cast<unsigned long long>(step), r.g_adv, r.d_adv, r.agan,
                r.cycle, r.identity, r.pixel, r.tv, r.total, lr);
  return std::string(buf);
}

// Draws the next batch pair for training: independent per-domain indices
// from the state's shuffle cursors, optional crop/flip augmentation, stacked
// to (batch, 3, crop, crop). All A samples draw before all B samples.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> next_training_batch(UnpairedDataset<T>& ds,
                                                    TrainState<T>& st,
                                                    const TrainingConfig& cfg) {
  const int64_t S = cfg.crop_size;
  auto stack = [&](bool domain_a) {
    Tensor<T> batch({cfg.batch_size, 3, S, S});
    for (int64_t b = 0; b < cfg.batch_size; ++b) {
      const int64_t idx =
          domain_a ? st.cursor_A.next(ds.size_A(), st.data_rng)
                   : st.cursor_B.next(ds.size_B(), st.data_rng);
      Tensor<T> img;
      if (cfg.augment) {
        img = augment(domain_a ? ds.raw_A(idx) : ds.raw_B(idx), S, st.aug_rng);
      } else {
        img = domain_a ? ds.image_A(idx, S) : ds.image_B(idx, S);
      }
      std::copy(img.begin(), img.end(), batch.data() + b * 3 * S * S);
    }
    return batch;
  };
  Tensor<T> bx = stack(true);
  Tensor<T> by = stack(false);
  return {bx, by};
}

struct TrainResult {
  std::string final_checkpoint;
  std::string loss_log;
  std::vector<LossReport> reports;
};

// Full run: iterates total_steps over the unpaired training split, logging
// one record per step and checkpointing at the configured interval plus at
// the end. total_steps == 0 just emits the freshly initialized checkpoint.
template <typename T>
TrainResult train(const TrainingConfig& cfg) {
  cfg.validate();
  if (cfg.data_root.empty()) throw ConfigError("train: data_root is required");
  if (cfg.out_dir.empty()) throw ConfigError("train: out_dir is required");
  set_num_threads(cfg.deterministic ? 1 : cfg.threads);

  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  {
    std::ofstream echo(fs::path(cfg.out_dir) / "config.txt",
                       std::ios::trunc);
    echo << cfg.serialize();
  }

  UnpairedDataset<T> ds = load_unpaired<T>(cfg.data_root, "train",
                                           Rng::derive_seed(cfg.seed, "dataset"));
  TrainState<T> st = init_train_state<T>(cfg);

  TrainResult result;
  result.loss_log = (fs::path(cfg.out_dir) / "loss_log.tsv").string();
  std::ofstream log(result.loss_log, std::ios::trunc);
  if (!log) throw IoError("train: cannot write '" + result.loss_log + "'");

  for (int64_t i = 0; i < cfg.total_steps; ++i) {
    auto [bx, by] = next_training_batch(ds, st, cfg);
    const double lr = lr_at(st.step, cfg);
    LossReport r = train_step(st, bx, by, cfg);
    log << format_log_line(st.step, r, lr);
    log.flush();
    result.reports.push_back(r);
    if (cfg.checkpoint_interval > 0 &&
        int64_t(st.step) % cfg.checkpoint_interval == 0 &&
        int64_t(st.step) != cfg.total_steps) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_%08llu.atn",
                    static_cast<unsigned long long>(st.step));
      save_checkpoint(st, cfg, (fs::path(cfg.out_dir) / name).string());
    }
  }

  result.final_checkpoint =
      (fs::path(cfg.out_dir) / "checkpoint_final.atn").string();
  save_checkpoint(st, cfg, result.final_checkpoint);
  return result;
}

}  // namespace attni2i
