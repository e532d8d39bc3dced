#pragma once

#include <filesystem>
#include <memory>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "clusterbreak/attack.hpp"
#include "clusterbreak/clustering.hpp"
#include "clusterbreak/data.hpp"
#include "clusterbreak/error.hpp"

#define EXPECT_CODE(stmt, expected)                                          \
  do {                                                                       \
    try {                                                                    \
      stmt;                                                                  \
      ADD_FAILURE() << "no error thrown by " #stmt;                          \
    } catch (const ::clusterbreak::Error& e__) {                             \
      EXPECT_EQ(e__.code(), expected) << e__.what();                         \
    }                                                                        \
  } while (0)

namespace testkit {

namespace cb = clusterbreak;

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() /
           ("cbtest_" + name + "_" + std::to_string(std::random_device{}()));
  std::filesystem::create_directories(p);
  return p;
}

inline cb::data::Dataset small_dataset(int n_per_class = 60, std::uint64_t seed = 0) {
  cb::data::SyntheticSpec s;
  s.n_per_class = n_per_class;
  s.seed = seed;
  return cb::data::make_synthetic_image_dataset(s);
}

inline cb::clustering::TrainerSettings quick_trainer(std::uint64_t seed = 0) {
  cb::clustering::TrainerSettings t;
  t.pretrain_epochs = 10;
  t.refine_epochs = 4;
  t.seed = seed;
  return t;
}

/// One small trained victim shared across a test binary.
inline std::shared_ptr<cb::clustering::ToyDeepClusterer> shared_victim() {
  static auto model = cb::clustering::train_toy_clusterer(small_dataset().images(), 4, quick_trainer());
  return model;
}

inline const cb::attack::TrainedGenerator& shared_generator() {
  static const cb::attack::TrainedGenerator g = [] {
    cb::attack::AttackConfig c;
    c.max_batches = 40;
    return cb::attack::train_attack(*shared_victim(), small_dataset().images(), c).generator;
  }();
  return g;
}

}  // namespace testkit
