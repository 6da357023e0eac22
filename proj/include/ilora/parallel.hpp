#pragma once

#include <cstddef>
#include <functional>

namespace ilora {

// Worker count: `requested` if nonzero, else ILRA_THREADS, else 1. Always capped by ILRA_THREADS when set.
std::size_t resolve_threads(std::size_t requested = 0);

// Runs fn(i, worker) for i in [0, n) on up to `threads` workers. Items are
// handed out in contiguous blocks so results written by index are reproducible.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t, std::size_t)>& fn);

} // namespace ilora
