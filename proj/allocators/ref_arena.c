/* Small dlmalloc-style allocator with in-place boundary tags.
 *
 * One fixed 1 MiB arena carved from a top chunk, exact-size LIFO fast bins
 * for chunks up to 128 bytes, and a single doubly linked free list for
 * everything else (first fit, split, coalesce with neighbours and top).
 *
 * Built twice: plain, with textbook unlink and no integrity checks, and with
 * REF_ARENA_CHECKED, which adds ptmalloc-style sanity checks that abort with
 * the same messages glibc uses.
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

#define ARENA_SIZE ((size_t)1 << 20)
#define ALIGN 16
#define MIN_CHUNK 32
#define FAST_MAX 128
#define FAST_BINS (FAST_MAX / ALIGN - 1)
#define PREV_INUSE ((size_t)1)
#define SIZE_BITS ((size_t)7)

typedef struct chunk {
  size_t prev_size;
  size_t size;
  struct chunk *fd;
  struct chunk *bk;
} chunk;

static unsigned char *arena;
static chunk *top;
static chunk *fastbins[FAST_BINS];
static chunk free_list; /* sentinel; fd/bk only */

#define chunksize(p) ((p)->size & ~SIZE_BITS)
#define prev_inuse(p) ((p)->size & PREV_INUSE)
#define at(p, off) ((chunk *)((unsigned char *)(p) + (off)))
#define mem2chunk(m) ((chunk *)((unsigned char *)(m) - 2 * sizeof(size_t)))
#define chunk2mem(p) ((void *)((unsigned char *)(p) + 2 * sizeof(size_t)))
#define fast_index(sz) ((sz) / ALIGN - 2)

#ifdef REF_ARENA_CHECKED
static void fail(const char *msg) {
  ssize_t r = write(STDERR_FILENO, msg, strlen(msg));
  r = write(STDERR_FILENO, "\n", 1);
  (void)r;
  __builtin_trap();
}
#define CHECK(cond, msg) \
  do {                   \
    if (!(cond)) fail(msg); \
  } while (0)
#else
#define CHECK(cond, msg) ((void)0)
#endif

__attribute__((unused)) static int in_arena(const void *p) {
  const unsigned char *c = (const unsigned char *)p;
  return c >= arena && c < arena + ARENA_SIZE;
}

static int init(void) {
  if (arena != NULL) return 1;
  void *m = mmap(NULL, ARENA_SIZE, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
  if (m == MAP_FAILED) return 0;
  arena = (unsigned char *)m;
  top = (chunk *)arena;
  top->prev_size = 0;
  top->size = ARENA_SIZE | PREV_INUSE;
  free_list.fd = free_list.bk = &free_list;
  memset(fastbins, 0, sizeof fastbins);
  return 1;
}

static size_t request2size(size_t n) {
  size_t sz = (n + sizeof(size_t) + ALIGN - 1) & ~(size_t)(ALIGN - 1);
  return sz < MIN_CHUNK ? MIN_CHUNK : sz;
}

static void unlink_chunk(chunk *p) {
  CHECK(chunksize(p) == at(p, chunksize(p))->prev_size, "corrupted size vs. prev_size");
  chunk *fd = p->fd;
  chunk *bk = p->bk;
  CHECK(fd->bk == p && bk->fd == p, "corrupted double-linked list");
  fd->bk = bk;
  bk->fd = fd;
}

static void link_front(chunk *p) {
  p->fd = free_list.fd;
  p->bk = &free_list;
  free_list.fd->bk = p;
  free_list.fd = p;
}

static void *ref_malloc(size_t n) {
  if (!init() || n > ARENA_SIZE) return NULL;
  const size_t sz = request2size(n);

  if (sz <= FAST_MAX) {
    chunk **bin = &fastbins[fast_index(sz)];
    chunk *p = *bin;
    if (p != NULL) {
      CHECK(chunksize(p) == sz, "malloc(): memory corruption (fast)");
      *bin = p->fd;
      return chunk2mem(p);
    }
  }

  for (chunk *p = free_list.fd; p != &free_list; p = p->fd) {
    const size_t psz = chunksize(p);
    CHECK(psz >= MIN_CHUNK && psz <= ARENA_SIZE, "malloc(): memory corruption");
    if (psz < sz) continue;
    unlink_chunk(p);
    if (psz - sz >= MIN_CHUNK) {
      chunk *rest = at(p, sz);
      rest->size = (psz - sz) | PREV_INUSE;
      at(rest, psz - sz)->prev_size = psz - sz;
      link_front(rest);
      p->size = sz | prev_inuse(p);
    } else {
      at(p, psz)->size |= PREV_INUSE;
    }
    return chunk2mem(p);
  }

  const size_t top_size = chunksize(top);
  if (top_size < sz + MIN_CHUNK) return NULL;
  chunk *p = top;
  top = at(p, sz);
  top->size = (top_size - sz) | PREV_INUSE;
  p->size = sz | prev_inuse(p);
  return chunk2mem(p);
}

static void ref_free(void *m) {
  if (m == NULL) return;
  chunk *p = mem2chunk(m);
  size_t sz = chunksize(p);
  CHECK(in_arena(p) && ((uintptr_t)m & (ALIGN - 1)) == 0, "free(): invalid pointer");
  CHECK(sz >= MIN_CHUNK && (sz & (ALIGN - 1)) == 0 && sz <= ARENA_SIZE, "free(): invalid size");

  if (sz <= FAST_MAX) {
    chunk **bin = &fastbins[fast_index(sz)];
    CHECK(chunksize(at(p, sz)) >= MIN_CHUNK && chunksize(at(p, sz)) <= ARENA_SIZE,
          "free(): invalid next size (fast)");
    CHECK(*bin != p, "double free or corruption (fasttop)");
    p->fd = *bin;
    *bin = p;
    return;
  }

  chunk *next = at(p, sz);
  CHECK(p != top, "double free or corruption (top)");
  CHECK(in_arena(next), "double free or corruption (out)");
  CHECK(prev_inuse(next), "double free or corruption (!prev)");
  size_t next_sz = chunksize(next);
  CHECK(next_sz >= MIN_CHUNK && next_sz <= ARENA_SIZE, "free(): invalid next size (normal)");

  if (!prev_inuse(p)) {
    const size_t prev_sz = p->prev_size;
    p = at(p, -(ptrdiff_t)prev_sz);
    sz += prev_sz;
    unlink_chunk(p);
  }

  if (next == top) {
    sz += next_sz;
    p->size = sz | PREV_INUSE;
    top = p;
    return;
  }
  if (!prev_inuse(at(next, next_sz))) {
    unlink_chunk(next);
    sz += next_sz;
  } else {
    next->size &= ~PREV_INUSE;
  }
  p->size = sz | PREV_INUSE;
  at(p, sz)->prev_size = sz;
  link_front(p);
}

EXPORT void *malloc(size_t n) { return ref_malloc(n); }

EXPORT void free(void *p) { ref_free(p); }

EXPORT size_t malloc_usable_size(void *m) {
  if (m == NULL) return 0;
  return chunksize(mem2chunk(m)) - sizeof(size_t);
}

/* Drops the whole arena so the next allocation starts from a fresh heap. */
EXPORT void heapprobe_ref_reset(void) {
  if (arena != NULL) munmap(arena, ARENA_SIZE);
  arena = NULL;
  top = NULL;
}

EXPORT void *heapprobe_ref_arena_base(void) {
  init();
  return arena;
}
