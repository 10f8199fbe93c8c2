#pragma once

// Line-delimited JSON metrics: one object per line,
//   {"run_id": ..., "step": ..., "epoch": ..., "metric": ..., "value": ..., "ts": ...}
// Each line is flushed as soon as it is written so a crashed run still leaves
// a valid stream.

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"

#include "clae/errors.hpp"
#include "clae/trainer.hpp"

namespace clae {

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class MetricsWriter {
 public:
  MetricsWriter(const std::filesystem::path& path, std::string run_id, bool append = true)
      : out_(path, append ? std::ios::app : std::ios::trunc), path_(path), run_id_(std::move(run_id)) {
    if (!out_) throw IoError("cannot open metrics file " + path.string());
  }

  void write(const MetricEvent& e) { write(e.step, e.epoch, e.name, e.value); }

  void write(std::size_t step, std::size_t epoch, const std::string& metric, double value,
             const nlohmann::json& extra = nullptr) {
    if (!std::isfinite(value))
      throw NumericDomainError("metric " + metric + " is not finite at step " + std::to_string(step));
    nlohmann::ordered_json line{{"run_id", run_id_}, {"step", step},   {"epoch", epoch},
                                {"metric", metric},  {"value", value}, {"ts", utc_timestamp()}};
    if (!extra.is_null()) line["extra"] = extra;
    out_ << line.dump() << '\n';
    out_.flush();
    if (!out_) throw IoError("write to metrics file " + path_.string() + " failed");
  }

  MetricsSink sink() {
    return [this](const MetricEvent& e) { write(e); };
  }

  const std::string& run_id() const { return run_id_; }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
  std::string run_id_;
};

}  // namespace clae
