#pragma once

// Synthetic relational credit dataset with a planted risk signal.
//
// Tabular signal lives in the application columns (including a nonlinear
// term a linear model cannot capture). The relational signal is carried by
// bureau records: each record holds two latent factors observable only
// through log-linear columns, and the per-record risk is the product of
// their tanh transforms, so single-column roll-up means are blind to it
// while a message-passing model can recover it. beta scales the relational
// part; beta=0 makes graph structure uninformative.

#include <cstdint>

#include "relrisk/table.hpp"

namespace relrisk {

struct SynthConfig {
  size_t n_customers = 5000;
  double base_rate = 0.08;   // target positive-class rate
  double beta = 0.0;         // relational-signal strength, >= 0
  double mean_bureau = 2.5;  // mean child rows per customer / per prev app
  double mean_prev = 1.8;
  double mean_installments = 3.0;
  double mean_pos = 2.0;
  double mean_card = 1.2;
};

// Deterministic for a fixed (config, seed). Throws ConfigError on
// n_customers < 10 or any negative rate.
RelationalDataset generate_synthetic(const SynthConfig& config, uint64_t seed);

}  // namespace relrisk
