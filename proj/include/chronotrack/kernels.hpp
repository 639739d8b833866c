#pragma once

// Single-threaded dense GEMM kernels. Every output element is reduced over k
// in ascending order, so results are bit-reproducible.

#include <cstddef>
#include <vector>

namespace chronotrack::kernels {

// C[M×N] (+)= A[M×K] · B[K×N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < M * N; ++i) {
      C[i] = T(0);
    }
  }
  std::size_t i = 0;
  for (; i + 4 <= M; i += 4) {
    T* c0 = C + (i + 0) * N;
    T* c1 = C + (i + 1) * N;
    T* c2 = C + (i + 2) * N;
    T* c3 = C + (i + 3) * N;
    const T* a0 = A + (i + 0) * K;
    const T* a1 = A + (i + 1) * K;
    const T* a2 = A + (i + 2) * K;
    const T* a3 = A + (i + 3) * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T* b = B + k * N;
      const T v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
      for (std::size_t j = 0; j < N; ++j) {
        const T bj = b[j];
        c0[j] += v0 * bj;
        c1[j] += v1 * bj;
        c2[j] += v2 * bj;
        c3[j] += v3 * bj;
      }
    }
  }
  for (; i < M; ++i) {
    T* c = C + i * N;
    const T* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T* b = B + k * N;
      const T v = a[k];
      for (std::size_t j = 0; j < N; ++j) {
        c[j] += v * b[j];
      }
    }
  }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      dst[c * rows + r] = src[r * cols + c];
    }
  }
}

// C[M×N] (+)= A[M×K] · B[N×K]^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate) {
  std::vector<T> bt(N * K);
  transpose(N, K, B, bt.data());
  gemm_nn(M, N, K, A, bt.data(), C, accumulate);
}

// C[M×N] (+)= A[K×M]^T · B[K×N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate) {
  std::vector<T> at(M * K);
  transpose(K, M, A, at.data());
  gemm_nn(M, N, K, at.data(), B, C, accumulate);
}

// c[i] += Σ_k a[k] · B[i][k], B is [N×K]
template <typename T>
void dot_rows(std::size_t N, std::size_t K, const T* a, const T* B, T* c) {
  for (std::size_t i = 0; i < N; ++i) {
    const T* b = B + i * K;
    T acc = 0;
    for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
    c[i] += acc;
  }
}

// C[M×N] += a[M] ⊗ b[N]
template <typename T>
void outer_acc(std::size_t M, std::size_t N, const T* a, const T* b, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T ai = a[i];
    T* c = C + i * N;
    for (std::size_t j = 0; j < N; ++j) c[j] += ai * b[j];
  }
}

}  // namespace chronotrack::kernels
