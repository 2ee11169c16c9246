#include "bmmae/kernels/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace bmmae::kernels {
namespace {

using detail::KernelTable;

bool avx2_supported() {
#if defined(__x86_64__) || defined(_M_X64)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

const KernelTable* table_for(Backend b) {
#if defined(__x86_64__) || defined(_M_X64)
    if (b == Backend::avx2) return &detail::avx2_table();
#endif
    (void)b;
    return &detail::scalar_table();
}

struct Dispatch {
    Backend backend;
    const KernelTable* table;
    Dispatch() {
        backend = avx2_supported() ? Backend::avx2 : Backend::scalar;
        if (const char* env = std::getenv("BMMAE_KERNEL")) {
            if (std::strcmp(env, "scalar") == 0) backend = Backend::scalar;
            if (std::strcmp(env, "avx2") == 0 && avx2_supported()) backend = Backend::avx2;
        }
        table = table_for(backend);
    }
};

Dispatch& dispatch() {
    static Dispatch d;
    return d;
}

}  // namespace

Backend active() { return dispatch().backend; }

const char* backend_name(Backend b) { return b == Backend::avx2 ? "avx2" : "scalar"; }

bool cpu_supports(Backend b) { return b == Backend::scalar || avx2_supported(); }

bool set_backend(Backend b) {
    if (!cpu_supports(b)) return false;
    dispatch().backend = b;
    dispatch().table = table_for(b);
    return true;
}

void axpy(int64_t n, double a, const double* x, double* y) { dispatch().table->axpy(n, a, x, y); }
double dot(int64_t n, const double* x, const double* y) { return dispatch().table->dot(n, x, y); }
double sum(int64_t n, const double* x) { return dispatch().table->sum(n, x); }
void mean_var(int64_t n, const double* x, double* mean, double* var) {
    dispatch().table->mean_var(n, x, mean, var);
}
void gemm_nn(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
             bool accumulate) {
    dispatch().table->gemm_nn(M, N, K, A, B, C, accumulate);
}
void gemm_nt(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
             bool accumulate) {
    dispatch().table->gemm_nt(M, N, K, A, B, C, accumulate);
}
void gemm_tn(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
             bool accumulate) {
    dispatch().table->gemm_tn(M, N, K, A, B, C, accumulate);
}

}  // namespace bmmae::kernels
