#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bwcloud {

enum class ErrorKind {
  format,
  empty_input,
  parameter,
  contract,
  calibration,
  empty_cloud,
  degenerate_cloud,
  shape,
  uninitialized_stats,
  diverged,
  graph,
  config,
  incompatible_checkpoint,
  partition,
  search_failure,
  manifest,
  undefined_variance,
  division,
  generation,
  io,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::format: return "format";
    case ErrorKind::empty_input: return "empty_input";
    case ErrorKind::parameter: return "parameter";
    case ErrorKind::contract: return "contract";
    case ErrorKind::calibration: return "calibration";
    case ErrorKind::empty_cloud: return "empty_cloud";
    case ErrorKind::degenerate_cloud: return "degenerate_cloud";
    case ErrorKind::shape: return "shape";
    case ErrorKind::uninitialized_stats: return "uninitialized_stats";
    case ErrorKind::diverged: return "diverged";
    case ErrorKind::graph: return "graph";
    case ErrorKind::config: return "config";
    case ErrorKind::incompatible_checkpoint: return "incompatible_checkpoint";
    case ErrorKind::partition: return "partition";
    case ErrorKind::search_failure: return "search_failure";
    case ErrorKind::manifest: return "manifest";
    case ErrorKind::undefined_variance: return "undefined_variance";
    case ErrorKind::division: return "division";
    case ErrorKind::generation: return "generation";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library. The message is a single line so the
/// CLI can print it verbatim as a machine-parsable record.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace bwcloud
