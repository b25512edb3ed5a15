#pragma once

#include <string>

#include "levi/nn.hpp"

namespace levi {

// Model checkpoint: a flat, versioned text container of parameter records.
//
//   levi-checkpoint 1
//   param <name> frozen=<0|1> shape=<d0>[x<d1>]
//   <one value per element, space separated, 17 significant digits>
//
// Values round-trip bit-exactly. Records appear in store order.
void save_checkpoint(const ParamStore& store, const std::string& path);
ParamStore load_checkpoint(const std::string& path);

// %.17g rendering used by every float-bearing text format in the artifact
std::string format_g17(double v);

// write-temp-then-rename so readers never observe a partial file
void atomic_write_file(const std::string& path, const std::string& contents);

} // namespace levi
