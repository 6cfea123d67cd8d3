#pragma once

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

namespace ncml {

// Worker cap: min(hardware, NCML_THREADS). At least 1.
inline int max_threads() {
  unsigned hw = std::thread::hardware_concurrency();
  int n = hw == 0 ? 1 : static_cast<int>(hw);
  if (const char* env = std::getenv("NCML_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1 && cap < n) n = cap;
  }
  return n;
}

// Deterministic chunked parallel reduction over [0, n).
//
// Work is split into chunks whose boundaries depend only on n. Each chunk
// is reduced sequentially in index order into its own accumulator, and the
// chunk results are merged in chunk order, so the result is bit-identical
// for any thread count.
//
// make_acc: () -> Acc, body: (Acc&, int64_t i), merge: (Acc&, Acc&&).
template <class Acc, class MakeAcc, class Body, class Merge>
Acc parallel_reduce(std::int64_t n, MakeAcc make_acc, Body body, Merge merge) {
  if (n <= 0) return make_acc();
  const std::int64_t chunk = std::max<std::int64_t>(1, (n + 63) / 64);
  const std::int64_t nchunks = (n + chunk - 1) / chunk;
  std::vector<std::optional<Acc>> slots(static_cast<size_t>(nchunks));
  std::atomic<std::int64_t> next{0};

  // The first exception from any worker wins; the rest drain quietly.
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;

  auto worker = [&] {
    for (;;) {
      if (failed.load(std::memory_order_relaxed)) break;
      std::int64_t c = next.fetch_add(1);
      if (c >= nchunks) break;
      try {
        Acc acc = make_acc();
        const std::int64_t lo = c * chunk;
        const std::int64_t hi = std::min(n, lo + chunk);
        for (std::int64_t i = lo; i < hi; ++i) body(acc, i);
        slots[static_cast<size_t>(c)] = std::move(acc);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        failed.store(true, std::memory_order_relaxed);
        break;
      }
    }
  };

  int threads = std::min<std::int64_t>(max_threads(), nchunks);
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);

  Acc total = make_acc();
  for (auto& slot : slots) merge(total, std::move(*slot));
  return total;
}

// Parallel for-each over [0, n) with no reduction; same chunking scheme.
template <class Body>
void parallel_for(std::int64_t n, Body body) {
  struct Nothing {};
  parallel_reduce<Nothing>(
      n, [] { return Nothing{}; }, [&](Nothing&, std::int64_t i) { body(i); },
      [](Nothing&, Nothing&&) {});
}

// Compensated (Kahan) accumulator. Makes dataset means insensitive to
// batch partitioning at the 1e-9 level.
struct KahanSum {
  double sum = 0.0;
  double carry = 0.0;
  std::int64_t count = 0;

  void add(double x) {
    add_raw(x);
    ++count;
  }
  void merge(const KahanSum& o) {
    add_raw(o.sum);
    add_raw(-o.carry);
    count += o.count;
  }
  double mean() const { return count == 0 ? 0.0 : sum / static_cast<double>(count); }

 private:
  void add_raw(double x) {
    double y = x - carry;
    double t = sum + y;
    carry = (t - sum) - y;
    sum = t;
  }
};

}  // namespace ncml
