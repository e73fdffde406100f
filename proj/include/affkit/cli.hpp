#pragma once

// Command-line front end: synth, stats, balance, train, eval, ensemble,
// gradcheck.

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "affkit/data.hpp"
#include "affkit/trainer.hpp"

namespace affkit::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitIo = 2;

/// args excludes the program name. Diagnostics go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Class counts, class weights, AU weights (MTL) and normalization stats.
std::string stats_report(std::span<const data::SampleRecord> records, data::Task task, const data::NormStats& norm);

/// Final per-sample decisions, written in the manifest schema of the task.
std::vector<data::SampleRecord> prediction_records(const trainer::Predictions& p,
                                                   std::span<const data::SampleRecord> records);

}  // namespace affkit::cli
