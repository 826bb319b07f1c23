// SPDX-License-Identifier: Apache-2.0
// Global allocation with a fixed 64-byte alignment.
//
// Eigen peels unaligned leading elements before vectorised loops, so the
// summation order of a reduction depends on where the allocator placed its
// operand. Pinning every heap block to a cache line removes that dependence:
// the same computation rounds identically across runs, resumes and worker
// counts.

#include <cstdlib>
#include <new>

namespace {

constexpr std::size_t kAlign = 64;

void* allocate(std::size_t n) noexcept {
  void* p = nullptr;
  if (posix_memalign(&p, kAlign, n == 0 ? 1 : n) != 0) return nullptr;
  return p;
}

void* allocate_or_throw(std::size_t n) {
  for (;;) {
    if (void* p = allocate(n)) return p;
    std::new_handler handler = std::get_new_handler();
    if (!handler) throw std::bad_alloc();
    handler();
  }
}

}  // namespace

void* operator new(std::size_t n) { return allocate_or_throw(n); }
void* operator new[](std::size_t n) { return allocate_or_throw(n); }
void* operator new(std::size_t n, const std::nothrow_t&) noexcept { return allocate(n); }
void* operator new[](std::size_t n, const std::nothrow_t&) noexcept { return allocate(n); }

void operator delete(void* p) noexcept { std::free(p); }
void operator delete[](void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }
void operator delete[](void* p, std::size_t) noexcept { std::free(p); }
void operator delete(void* p, const std::nothrow_t&) noexcept { std::free(p); }
void operator delete[](void* p, const std::nothrow_t&) noexcept { std::free(p); }
