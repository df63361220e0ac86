// CSV export of ablation records, evolution curves, chunk reports and the
// pretraining log. Values are printed with a fixed number of decimals so
// identical results always produce identical bytes.
#pragma once

#include <cstdio>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "spargan/evaluation.hpp"
#include "spargan/spl.hpp"
#include "spargan/tcgan.hpp"

namespace spargan {

inline std::string fixed(double v, int decimals = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

inline void write_ablation_csv(std::ostream& out, std::span<const MetricsRecord> records) {
  out << "arm,n,seed,top1,top3,top5\n";
  for (const auto& r : records) {
    out << arm_name(r.arm) << ',' << r.n << ',' << r.seed << ',' << fixed(r.top1) << ','
        << fixed(r.top3) << ',' << fixed(r.top5) << '\n';
  }
}

inline void write_evolution_csv(std::ostream& out, std::span<const IterationMetrics> rows) {
  out << "iteration,top1,top5\n";
  for (const auto& r : rows) {
    out << r.iteration << ',' << fixed(r.top1) << ',' << fixed(r.top5) << '\n';
  }
}

inline void write_chunk_csv(std::ostream& out, std::span<const ChunkReport> rows) {
  out << "chunk,top1,top5,quality\n";
  for (const auto& r : rows) {
    out << r.chunk << ',' << fixed(r.top1) << ',' << fixed(r.top5) << ',' << fixed(r.quality)
        << '\n';
  }
}

inline void write_pretrain_log_csv(std::ostream& out, std::span<const EpochLog> rows) {
  out << "epoch,loss_d,loss_g,base_top1\n";
  for (const auto& r : rows) {
    out << r.epoch << ',' << fixed(r.loss_d, 9) << ',' << fixed(r.loss_g, 9) << ','
        << fixed(r.base_top1) << '\n';
  }
}

// Per-iteration mean over the seeds of one (arm, n) pair. Empty when the arm
// has no evolution (non-SPL arms) or no cell matches.
inline std::vector<IterationMetrics> mean_evolution(std::span<const CellResult> cells, Arm arm,
                                                    int n) {
  if (arm != Arm::SplD && arm != Arm::SplDG) return {};
  std::vector<IterationMetrics> out;
  int count = 0;
  for (const auto& c : cells) {
    if (c.n != n) continue;
    const auto& evo = arm == Arm::SplD ? c.evolution_d : c.evolution_dg;
    if (evo.empty()) continue;
    if (out.empty()) {
      out.resize(evo.size());
      for (std::size_t i = 0; i < evo.size(); ++i) out[i].iteration = evo[i].iteration;
    }
    for (std::size_t i = 0; i < evo.size(); ++i) {
      out[i].top1 += evo[i].top1;
      out[i].top5 += evo[i].top5;
    }
    ++count;
  }
  for (auto& r : out) {
    r.top1 /= count;
    r.top5 /= count;
  }
  return out;
}

// Per-chunk mean over the seeds of the smallest n whose cells produced a
// chunk report.
inline std::vector<ChunkReport> mean_chunks(std::span<const CellResult> cells) {
  std::optional<int> n;
  for (const auto& c : cells) {
    if (!c.chunks.empty() && (!n || c.n < *n)) n = c.n;
  }
  if (!n) return {};
  std::vector<ChunkReport> out;
  int count = 0;
  for (const auto& c : cells) {
    if (c.n != *n || c.chunks.empty()) continue;
    if (out.empty()) {
      out.resize(c.chunks.size());
      for (std::size_t i = 0; i < out.size(); ++i) out[i].chunk = c.chunks[i].chunk;
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i].top1 += c.chunks[i].top1;
      out[i].top5 += c.chunks[i].top5;
      out[i].quality += c.chunks[i].quality;
    }
    ++count;
  }
  for (auto& r : out) {
    r.top1 /= count;
    r.top5 /= count;
    r.quality /= count;
  }
  return out;
}

}  // namespace spargan
