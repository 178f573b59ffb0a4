/* LD_PRELOAD interposer that counts heap calls while armed and forwards
 * everything to glibc. */

#include <stddef.h>

extern void *__libc_malloc(size_t);
extern void __libc_free(void *);
extern void *__libc_calloc(size_t, size_t);
extern void *__libc_realloc(void *, size_t);

static int armed;
static unsigned long mallocs;
static unsigned long frees;
static unsigned long others;

void *malloc(size_t n) {
  if (armed) ++mallocs;
  return __libc_malloc(n);
}

void free(void *p) {
  if (armed) ++frees;
  __libc_free(p);
}

void *calloc(size_t n, size_t m) {
  if (armed) ++others;
  return __libc_calloc(n, m);
}

void *realloc(void *p, size_t n) {
  if (armed) ++others;
  return __libc_realloc(p, n);
}

void heapprobe_count_arm(int on) {
  if (on) mallocs = frees = others = 0;
  armed = on;
}

unsigned long heapprobe_count_mallocs(void) { return mallocs; }
unsigned long heapprobe_count_frees(void) { return frees; }
unsigned long heapprobe_count_others(void) { return others; }
