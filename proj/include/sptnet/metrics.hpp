#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "sptnet/config.hpp"
#include "sptnet/schedule.hpp"

namespace sptnet {

// One JSON object per line: a `config` record, then `step` / `epoch` records, and an `error` record if the run
// aborts. Nothing machine- or path-dependent is written, so identical runs give identical files.
class MetricsWriter {
 public:
  MetricsWriter(const std::filesystem::path& path, const ScheduleConfig& schedule, bool append = false);

  void config(const ConfigValues& values);
  void step(const StepRecord& record);
  void epoch(const EpochRecord& record);
  void error(int epoch, std::int64_t iteration, const std::string& message);

 private:
  void line(const std::string& text);

  std::filesystem::path path_;
  std::ofstream out_;
  double lr_b_, lr_p_;
};

struct PlotRow {
  std::string source;
  std::string strategy;
  int k = 0, m = 0, m_plus = 0;
  std::string variant;
  int epoch = 0;
  double acc_all = 0.0;
  std::optional<double> acc_old, acc_new;
};

struct PlotTable {
  std::vector<PlotRow> rows;
  int skipped_lines = 0;

  std::string csv() const;
};

/// Evaluated epochs of each metrics file: the last one per file, or all of them with `all_epochs`.
PlotTable plot_data(const std::vector<std::filesystem::path>& files, bool all_epochs = false);

}  // namespace sptnet
