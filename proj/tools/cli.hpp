#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace patchseg::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kBadFlags = 2,
  kIo = 3,
  kDivergence = 4,
  kDimsMismatch = 5,
};

/// Entry point behind the `patchseg` executable. Reports go to `out`, logs
/// and the one-line error record to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace patchseg::cli
