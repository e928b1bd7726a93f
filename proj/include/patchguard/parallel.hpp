#pragma once

#include <cstddef>
#include <functional>

namespace patchguard {

// Worker cap: PATCHGUARD_THREADS if set to a positive integer, otherwise the
// hardware concurrency (at least 1).
std::size_t worker_threads();

// Splits [0, n) into min(threads, n) contiguous chunks and runs
// fn(chunk, begin, end) for each, one thread per chunk. Chunk boundaries only
// depend on (n, threads), so per-chunk results reduced in chunk order are
// deterministic for a fixed thread count.
std::size_t chunk_count(std::size_t n, std::size_t threads);
void parallel_chunks(std::size_t n, std::size_t threads,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn);

}  // namespace patchguard
