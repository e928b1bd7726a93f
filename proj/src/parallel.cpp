#include "patchguard/parallel.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <thread>
#include <vector>

namespace patchguard {

std::size_t worker_threads() {
  if (const char* env = std::getenv("PATCHGUARD_THREADS")) {
    std::size_t value = 0;
    const auto [ptr, ec] = std::from_chars(env, env + std::strlen(env), value);
    if (ec == std::errc{} && value > 0) return value;
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

std::size_t chunk_count(std::size_t n, std::size_t threads) {
  return std::max<std::size_t>(1, std::min(n, std::max<std::size_t>(1, threads)));
}

void parallel_chunks(std::size_t n, std::size_t threads,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
  const std::size_t chunks = chunk_count(n, threads);
  auto bounds = [&](std::size_t c) { return c * n / chunks; };
  if (chunks == 1) {
    fn(0, 0, n);
    return;
  }
  std::vector<std::exception_ptr> errors(chunks);
  {
    std::vector<std::jthread> pool;
    pool.reserve(chunks);
    for (std::size_t c = 0; c < chunks; ++c) {
      pool.emplace_back([&, c] {
        try {
          fn(c, bounds(c), bounds(c + 1));
        } catch (...) {
          errors[c] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace patchguard
