/* One object per mapping: every allocation gets its own page-aligned
 * mmap followed by an inaccessible guard page. Nothing is stored next to
 * the payload; the bookkeeping table lives in this library's own data.
 * Freed spans stay reserved and inaccessible, so an address is never
 * handed out twice until reset.
 *
 * Single-threaded only.
 */

#define _GNU_SOURCE
#include <stddef.h>
#include <stdint.h>
#include <string.h>
#include <sys/mman.h>
#include <unistd.h>

#define EXPORT __attribute__((visibility("default")))

#define PAGE ((size_t)4096)
#define MAX_OBJECTS 4096
#define MAX_REQUEST ((size_t)1 << 30)

typedef struct {
  void *addr;
  size_t span; /* usable bytes, page multiple */
  int freed;
} object;

static object table[MAX_OBJECTS];

static void fail(const char *msg) {
  ssize_t r = write(STDERR_FILENO, msg, strlen(msg));
  r = write(STDERR_FILENO, "\n", 1);
  (void)r;
  __builtin_trap();
}

static object *lookup(const void *p) {
  for (size_t i = 0; i < MAX_OBJECTS; ++i) {
    if (table[i].addr == p && !table[i].freed) return &table[i];
  }
  return NULL;
}

EXPORT void *malloc(size_t n) {
  if (n > MAX_REQUEST) return NULL;
  object *slot = NULL;
  for (size_t i = 0; slot == NULL && i < MAX_OBJECTS; ++i) {
    if (table[i].addr == NULL) slot = &table[i];
  }
  if (slot == NULL) return NULL;
  const size_t span = n == 0 ? PAGE : (n + PAGE - 1) & ~(PAGE - 1);
  unsigned char *m = mmap(NULL, span + PAGE, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
  if (m == MAP_FAILED) return NULL;
  mprotect(m + span, PAGE, PROT_NONE);
  slot->addr = m;
  slot->span = span;
  return m;
}

EXPORT void free(void *p) {
  if (p == NULL) return;
  object *o = lookup(p);
  if (o == NULL) fail("free(): invalid pointer");
  mprotect(o->addr, o->span, PROT_NONE);
  o->freed = 1;
}

EXPORT size_t malloc_usable_size(void *p) {
  object *o = lookup(p);
  return o == NULL ? 0 : o->span;
}

EXPORT void heapprobe_ref_reset(void) {
  for (size_t i = 0; i < MAX_OBJECTS; ++i) {
    if (table[i].addr != NULL) munmap(table[i].addr, table[i].span + PAGE);
  }
  memset(table, 0, sizeof table);
}
