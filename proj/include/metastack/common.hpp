#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace metastack {

/// Malformed input: bad CSV, bad message body, unknown label, etc.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An experiment that cannot proceed (single-class fold, empty split).
class ExperimentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// SplitMix64 step; used to derive independent child seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

/// Thread cap from METASTACK_THREADS (defaults to hardware concurrency).
std::size_t thread_budget();

/// Runs fn(i) for i in [0, n). Work is spread over up to thread_budget()
/// threads; nested calls from a worker run serially so only the outermost
/// loop fans out. Exceptions from workers are rethrown on the caller.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

/// Shortest decimal string that round-trips to the same double.
std::string format_double(double v);

/// Parses a full string as a double; returns false on any trailing junk.
bool parse_double(std::string_view text, double& out);

}  // namespace metastack
