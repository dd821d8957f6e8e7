#pragma once

#include <functional>

namespace geofuse {

/// Worker count used by parallel_for. Defaults to 1.
void set_num_threads(int n);
int num_threads();

/// Runs fn(i) for i in [0, n). Work is split into contiguous static chunks;
/// callers must write only to disjoint, index-addressed outputs so that the
/// result does not depend on the worker count.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace geofuse
