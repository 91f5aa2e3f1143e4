// Versioned single-file container for a trained model: config echo,
// vocabulary and parameters, guarded by a checksum.

#ifndef MLR_CHECKPOINT_H_
#define MLR_CHECKPOINT_H_

#include <iosfwd>
#include <stdexcept>
#include <string>

#include "mlr/training.h"

namespace mlr {

inline constexpr std::uint64_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_checkpoint(std::ostream& out, const TrainedModel& model);
// Throws CheckpointError on a bad magic, version mismatch, truncation,
// checksum failure, or parameters that disagree with the stored config.
TrainedModel read_checkpoint(std::istream& in);

// Writes to a temporary sibling and renames it over `path`.
void save_checkpoint(const TrainedModel& model, const std::string& path);
TrainedModel load_checkpoint(const std::string& path);

}  // namespace mlr

#endif  // MLR_CHECKPOINT_H_
