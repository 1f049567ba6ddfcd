#pragma once

namespace coar {

// Keeps freed activation buffers in the heap instead of returning them to the
// OS after every forward pass. No-op outside glibc.
void tune_allocator();

}  // namespace coar
