#include "sptnet/metrics.hpp"

#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace sptnet {

using nlohmann::json;

namespace {

json terms_object(const std::vector<std::pair<std::string, double>>& terms) {
  json out = json::object();
  for (const auto& [k, v] : terms) out[k] = v;
  return out;
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

MetricsWriter::MetricsWriter(const std::filesystem::path& path, const ScheduleConfig& schedule, bool append)
    : path_(path), lr_b_(schedule.lr_b), lr_p_(schedule.lr_p) {
  out_.open(path, append ? std::ios::app : std::ios::trunc);
  if (!out_) throw IoError("cannot open " + path.string() + " for writing");
}

void MetricsWriter::line(const std::string& text) {
  out_ << text << '\n';
  out_.flush();
  if (!out_) throw IoError("failed writing " + path_.string());
}

void MetricsWriter::config(const ConfigValues& values) {
  json cfg = json::object();
  for (const auto& [k, v] : values.values())
    if (k.rfind("run.", 0) != 0 || k == "run.seed") cfg[k] = v;
  line(json{{"type", "config"}, {"config", cfg}}.dump());
}

void MetricsWriter::step(const StepRecord& r) {
  line(json{{"type", "step"},
            {"epoch", r.epoch},
            {"step", r.step},
            {"stage", to_string(r.stage)},
            {"lr_b", lr_b_ * r.lr_scale},
            {"lr_p", lr_p_ * r.lr_scale},
            {"terms", terms_object(r.terms)}}
           .dump());
}

void MetricsWriter::epoch(const EpochRecord& r) {
  json j{{"type", "epoch"}, {"epoch", r.epoch}, {"iteration", r.iteration}, {"terms", terms_object(r.mean_terms)}};
  if (r.evaluated) {
    j["acc_all"] = r.acc.acc_all;
    j["acc_old"] = optional_number(r.acc.acc_old);
    j["acc_new"] = optional_number(r.acc.acc_new);
  }
  line(j.dump());
}

void MetricsWriter::error(int epoch, std::int64_t iteration, const std::string& message) {
  line(json{{"type", "error"}, {"epoch", epoch}, {"iteration", iteration}, {"message", message}}.dump());
}

std::string PlotTable::csv() const {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "source,variant,strategy,k,m,m_plus,epoch,acc_all,acc_old,acc_new\n";
  for (const auto& r : rows) {
    out << r.source << ',' << r.variant << ',' << r.strategy << ',' << r.k << ',' << r.m << ',' << r.m_plus << ','
        << r.epoch << ',' << r.acc_all << ',';
    if (r.acc_old) out << *r.acc_old;
    out << ',';
    if (r.acc_new) out << *r.acc_new;
    out << '\n';
  }
  return out.str();
}

PlotTable plot_data(const std::vector<std::filesystem::path>& files, bool all_epochs) {
  PlotTable table;
  for (const auto& file : files) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open " + file.string());
    PlotRow base;
    base.source = file.string();
    bool have_config = false;
    std::vector<PlotRow> rows;
    for (std::string text; std::getline(in, text);) {
      if (text.empty()) continue;
      try {
        const json j = json::parse(text);
        const std::string type = j.at("type").get<std::string>();
        if (type == "config") {
          const json& c = j.at("config");
          base.variant = c.at("prompt.variant").get<std::string>();
          base.strategy = c.at("schedule.strategy").get<std::string>();
          base.k = std::stoi(c.at("schedule.k").get<std::string>());
          base.m = std::stoi(c.at("prompt.m").get<std::string>());
          base.m_plus = std::stoi(c.at("prompt.m_plus").get<std::string>());
          have_config = true;
        } else if (type == "epoch" && j.contains("acc_all")) {
          if (!have_config) throw std::runtime_error("epoch record before config record");
          PlotRow r = base;
          r.epoch = j.at("epoch").get<int>();
          r.acc_all = j.at("acc_all").get<double>();
          if (!j.at("acc_old").is_null()) r.acc_old = j.at("acc_old").get<double>();
          if (!j.at("acc_new").is_null()) r.acc_new = j.at("acc_new").get<double>();
          rows.push_back(r);
        }
      } catch (const std::exception&) {
        ++table.skipped_lines;
      }
    }
    if (rows.empty()) continue;
    if (all_epochs) table.rows.insert(table.rows.end(), rows.begin(), rows.end());
    else table.rows.push_back(rows.back());
  }
  return table;
}

}  // namespace sptnet
