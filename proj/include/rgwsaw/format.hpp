#pragma once

#include <string>

namespace rgwsaw {

/// Shortest decimal string that round-trips to the same double.
std::string format_double(double v);

}  // namespace rgwsaw
