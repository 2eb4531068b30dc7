#pragma once

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <numbers>
#include <vector>

#include "dbconformer/rng.hpp"
#include "dbconformer/trialset.hpp"

namespace dbc {

/// Two-class motor-imagery surrogate.
///
/// Every channel carries 1/f^exponent background noise. Two channels carry a
/// 10 Hz rhythm; on trials of class 0 the rhythm on `left` is scaled by
/// `attenuation`, on class 1 the rhythm on `right`. The attenuated channel also
/// shifts by a slow potential of size slow_amplitude·(1 − attenuation), so
/// attenuation = 1 removes every class difference. Each subject gets its own
/// channel gains and a mixing matrix I + mixing·N(0, 1).
struct SynthConfig {
  std::size_t subjects = 4;
  std::size_t trials = 100;  // per subject
  std::size_t channels = 8;
  std::size_t samples = 512;
  double sample_rate = 250.0;
  std::uint64_t seed = 1;
  double attenuation = 0.5;
  double noise_exponent = 1.0;
  double noise_amplitude = 3.0;
  double rhythm_amplitude = 1.0;
  double rhythm_frequency = 10.0;
  double slow_amplitude = 0.5;
  double gain_jitter = 0.2;
  double mixing = 0.1;

  std::size_t left_channel() const { return channels / 4; }
  std::size_t right_channel() const { return channels - 1 - channels / 4; }

  void validate() const {
    if (channels < 4) throw ConfigError("synthetic data needs at least 4 channels, got " + std::to_string(channels));
    if (samples < 64) throw ConfigError("synthetic data needs at least 64 samples, got " + std::to_string(samples));
    if (subjects == 0 || trials == 0) throw ConfigError("synthetic data needs subjects and trials");
    if (!(sample_rate > 0.0)) throw ConfigError("sample rate must be positive");
    if (!(attenuation >= 0.0 && attenuation <= 1.0)) throw ConfigError("attenuation must be in [0, 1]");
    if (!(gain_jitter >= 0.0 && gain_jitter < 1.0)) throw ConfigError("gain jitter must be in [0, 1)");
  }
};

inline nlohmann::json to_json(const SynthConfig& c) {
  return {{"subjects", c.subjects},
          {"trials_per_subject", c.trials},
          {"channels", c.channels},
          {"samples", c.samples},
          {"sample_rate", c.sample_rate},
          {"seed", c.seed},
          {"attenuation", c.attenuation},
          {"noise_exponent", c.noise_exponent},
          {"noise_amplitude", c.noise_amplitude},
          {"rhythm_amplitude", c.rhythm_amplitude},
          {"rhythm_frequency", c.rhythm_frequency},
          {"slow_amplitude", c.slow_amplitude},
          {"gain_jitter", c.gain_jitter},
          {"mixing", c.mixing},
          {"informative_channels", {c.left_channel(), c.right_channel()}}};
}

namespace detail {

/// Unit-variance noise with power spectrum proportional to 1/f^exponent (DC removed).
inline std::vector<double> pink_noise(std::size_t n, double exponent, Rng& rng) {
  std::vector<double> white(n);
  for (auto& v : white) v = rng.normal();
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spec;
  fft.fwd(spec, white);
  spec[0] = 0.0;
  for (std::size_t k = 1; k < n; ++k) {
    const std::size_t f = std::min(k, n - k);
    spec[k] *= std::pow(static_cast<double>(f), -exponent / 2.0);
  }
  std::vector<double> out;
  fft.inv(out, spec);
  double mean = 0, ss = 0;
  for (double v : out) mean += v;
  mean /= static_cast<double>(n);
  for (double& v : out) {
    v -= mean;
    ss += v * v;
  }
  const double sd = std::sqrt(ss / static_cast<double>(n));
  for (double& v : out) v /= sd;
  return out;
}

}  // namespace detail

/// One TrialSet per subject (subject ids 1..n), trials stored in recording order
/// with balanced, randomly ordered labels.
inline std::vector<TrialSet> generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.channels, T = cfg.samples;
  const std::size_t left = cfg.left_channel(), right = cfg.right_channel();
  const Rng root(cfg.seed);
  std::vector<TrialSet> sets;
  for (std::size_t s = 0; s < cfg.subjects; ++s) {
    const Rng subject = root.derive("subject", s);
    Rng shape_rng = subject.derive("shape");
    Eigen::VectorXd gain(C);
    for (std::size_t c = 0; c < C; ++c) gain[c] = shape_rng.uniform(1.0 - cfg.gain_jitter, 1.0 + cfg.gain_jitter);
    Matrix mix = Matrix::Identity(C, C);
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < C; ++j) mix(i, j) += cfg.mixing * shape_rng.normal();
    const Matrix project = mix * gain.asDiagonal();

    TrialSet set;
    set.subject_id = static_cast<std::uint32_t>(s + 1);
    set.sample_rate = static_cast<float>(cfg.sample_rate);
    set.channels = C;
    set.samples = T;
    set.labels.resize(cfg.trials);
    for (std::size_t i = 0; i < cfg.trials; ++i) set.labels[i] = static_cast<std::int32_t>(i % 2);
    Rng label_rng = subject.derive("labels");
    label_rng.shuffle(set.labels);
    set.chronological_index.resize(cfg.trials);
    for (std::size_t i = 0; i < cfg.trials; ++i) set.chronological_index[i] = static_cast<std::uint32_t>(i);
    set.data.resize(cfg.trials * C * T);

    Matrix source(C, T);
    for (std::size_t i = 0; i < cfg.trials; ++i) {
      Rng noise_rng = subject.derive("noise", i);
      Rng phase_rng = subject.derive("phase", i);
      for (std::size_t c = 0; c < C; ++c) {
        const auto n = detail::pink_noise(T, cfg.noise_exponent, noise_rng);
        for (std::size_t t = 0; t < T; ++t) source(c, t) = cfg.noise_amplitude * n[t];
      }
      const std::size_t weak = set.labels[i] == 0 ? left : right;
      for (std::size_t c : {left, right}) {
        const double amp = cfg.rhythm_amplitude * (c == weak ? cfg.attenuation : 1.0);
        const double phase = phase_rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double w = 2.0 * std::numbers::pi * cfg.rhythm_frequency / cfg.sample_rate;
        for (std::size_t t = 0; t < T; ++t) source(c, t) += amp * std::sin(w * static_cast<double>(t) + phase);
      }
      source.row(weak).array() -= cfg.slow_amplitude * (1.0 - cfg.attenuation);
      set.trial(i) = project * source;
    }
    sets.push_back(std::move(set));
  }
  return sets;
}

}  // namespace dbc
