/* Minimal allocator without malloc_usable_size: a bump pointer over a
 * static arena. free() is a no-op. Exercises the usable-size shim. */

#include <stddef.h>
#include <stdint.h>

#define ARENA_BYTES ((size_t)8 << 20)

static _Alignas(16) unsigned char arena[ARENA_BYTES];
static size_t used;

void *malloc(size_t n) {
  const size_t need = (n + 15) & ~(size_t)15;
  if (n > ARENA_BYTES || need > ARENA_BYTES - used) return NULL;
  void *p = arena + used;
  used += need == 0 ? 16 : need;
  return p;
}

void free(void *p) { (void)p; }

void heapprobe_ref_reset(void) { used = 0; }
