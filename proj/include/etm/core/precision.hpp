#pragma once

// The numeric core (tensors, ops, models, losses) compiles at one of two
// precisions. Each lives in its own inline namespace so the float training
// build and the double gradient-checking build can be linked side by side.
#if defined(ETM_DOUBLE_PRECISION)
#define ETM_NS etm::inline f64
#else
#define ETM_NS etm::inline f32
#endif

namespace ETM_NS {

#if defined(ETM_DOUBLE_PRECISION)
using real = double;
#else
using real = float;
#endif

}  // namespace ETM_NS
