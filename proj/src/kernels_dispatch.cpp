/*
 * Copyright 2026 The parmuon Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "parmuon/kernels.hpp"

namespace parmuon::kernels {

namespace {

bool avx2_available() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Backend initial_backend() {
  if (const char* env = std::getenv("PARMUON_KERNELS")) {
    const std::string v(env);
    if (v == "scalar") return Backend::kScalar;
    if (v == "avx2") {
      if (!avx2_available()) {
        throw std::runtime_error("PARMUON_KERNELS=avx2 but this CPU lacks AVX2/FMA");
      }
      return Backend::kAvx2;
    }
    throw std::runtime_error("unknown PARMUON_KERNELS value: " + v);
  }
  return detect_backend();
}

std::atomic<Backend>& backend_slot() {
  static std::atomic<Backend> slot{initial_backend()};
  return slot;
}

}  // namespace

std::string_view backend_name(Backend b) {
  switch (b) {
    case Backend::kScalar:
      return "scalar";
    case Backend::kAvx2:
      return "avx2";
  }
  return "unknown";
}

Backend detect_backend() {
  return avx2_available() ? Backend::kAvx2 : Backend::kScalar;
}

Backend active_backend() { return backend_slot().load(); }

void set_backend(Backend b) {
  if (b == Backend::kAvx2 && !avx2_available()) {
    throw std::runtime_error("AVX2 kernels requested but unsupported on this CPU");
  }
  backend_slot().store(b);
}

const Kernels<float>& f32() {
#if defined(__x86_64__) || defined(_M_X64)
  if (active_backend() == Backend::kAvx2) return detail::avx2_f32();
#endif
  return detail::scalar_f32();
}

const Kernels<double>& f64() {
#if defined(__x86_64__) || defined(_M_X64)
  if (active_backend() == Backend::kAvx2) return detail::avx2_f64();
#endif
  return detail::scalar_f64();
}

}  // namespace parmuon::kernels
