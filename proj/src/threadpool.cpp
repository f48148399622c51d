#include "vqfr/threadpool.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace vqfr {

namespace {

// Persistent pool; workers sleep on a condition variable between regions.
class Pool {
public:
    explicit Pool(int workers) : n_workers_(workers), job_seq_(0), pending_(0) {
        for (int i = 0; i < n_workers_; i++) {
            threads_.emplace_back([this, i] { worker_loop(i + 1); });
        }
    }

    ~Pool() {
        {
            std::unique_lock<std::mutex> lk(m_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    // Runs job(slot) on worker slots 1..n_workers_ plus slot 0 on the caller.
    void run(const std::function<void(int)>& job) {
        {
            std::unique_lock<std::mutex> lk(m_);
            job_ = &job;
            pending_ = n_workers_;
            job_seq_++;
        }
        cv_.notify_all();
        job(0);
        std::unique_lock<std::mutex> lk(m_);
        done_cv_.wait(lk, [this] { return pending_ == 0; });
        job_ = nullptr;
    }

    int slots() const { return n_workers_ + 1; }

private:
    void worker_loop(int slot) {
        uint64_t seen = 0;
        for (;;) {
            const std::function<void(int)>* job = nullptr;
            {
                std::unique_lock<std::mutex> lk(m_);
                cv_.wait(lk, [&] { return stop_ || job_seq_ != seen; });
                if (stop_) return;
                seen = job_seq_;
                job = job_;
            }
            (*job)(slot);
            {
                std::unique_lock<std::mutex> lk(m_);
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    int n_workers_;
    std::vector<std::thread> threads_;
    std::mutex m_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(int)>* job_ = nullptr;
    uint64_t job_seq_;
    int pending_;
    bool stop_ = false;
};

int resolve_threads() {
    if (const char* env = std::getenv("VQFR_THREADS")) {
        int v = std::atoi(env);
        if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

Pool* pool_instance() {
    static int n = resolve_threads();
    if (n <= 1) return nullptr;
    static Pool pool(n - 1);  // caller thread is slot 0
    return &pool;
}

}  // namespace

int num_threads() {
    static int n = resolve_threads();
    return n;
}

void parallel_for_chunks(size_t n, const std::function<void(size_t, size_t)>& fn,
                         size_t min_items_per_thread) {
    if (n == 0) return;
    Pool* pool = pool_instance();
    size_t max_useful = min_items_per_thread > 0 ? (n + min_items_per_thread - 1) / min_items_per_thread : n;
    int parts = pool ? static_cast<int>(std::min<size_t>(pool->slots(), max_useful)) : 1;
    if (parts <= 1) {
        fn(0, n);
        return;
    }
    pool->run([&](int slot) {
        if (slot >= parts) return;
        size_t chunk = (n + parts - 1) / parts;
        size_t begin = chunk * static_cast<size_t>(slot);
        size_t end = std::min(n, begin + chunk);
        if (begin < end) fn(begin, end);
    });
}

void parallel_for(size_t n, const std::function<void(size_t)>& fn, size_t grain) {
    parallel_for_chunks(
        n, [&](size_t b, size_t e) { for (size_t i = b; i < e; i++) fn(i); }, grain);
}

}  // namespace vqfr
