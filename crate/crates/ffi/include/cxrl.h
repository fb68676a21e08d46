/* C interface to the cxrl library. Maintained by hand alongside src/lib.rs. */

#ifndef CXRL_H
#define CXRL_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes returned by every fallible call. */
#define CXRL_OK 0
#define CXRL_ERR_NULL 1
#define CXRL_ERR_INVALID 2
#define CXRL_ERR_IO 3
#define CXRL_ERR_DIVERGED 4
#define CXRL_ERR_BAD_MAGIC 5
#define CXRL_ERR_VERSION 6
#define CXRL_ERR_HASH 7
#define CXRL_ERR_TRUNCATED 8
#define CXRL_ERR_BUFFER 9
#define CXRL_ERR_PANIC 10
#define CXRL_ERR_FAILED 11

typedef struct CxrlRewards CxrlRewards;
typedef struct CxrlGenerator CxrlGenerator;

typedef struct cxrl_reward_breakdown {
  double r_align;
  double r_diag;
  double r_consist;
  double total;
} cxrl_reward_breakdown;

const char *cxrl_version(void);

/* Copies the last error of the calling thread into buf; returns its full length. */
size_t cxrl_last_error(char *buf, size_t len);

/* psi = {s_x, s_y, t_x, t_y, theta} */
double cxrl_reward_align(const double *psi);

int cxrl_rewards_load(const char *path, CxrlRewards **out);
size_t cxrl_rewards_image_side(const CxrlRewards *models);
/* Images are row-major side*side arrays in [0, 1]; labels holds 4 bytes;
 * lambda = {align, diag, consist}. */
int cxrl_rewards_score(const CxrlRewards *models,
                       const double *image,
                       const double *anchor_image,
                       const char *report,
                       const uint8_t *labels,
                       const double *lambda,
                       cxrl_reward_breakdown *out);
void cxrl_rewards_free(CxrlRewards *models);

int cxrl_generator_load(const char *path, CxrlGenerator **out);
size_t cxrl_generator_image_len(const CxrlGenerator *gen);
int cxrl_generator_sample(const CxrlGenerator *gen,
                          const char *report,
                          uint64_t seed,
                          double *pixels,
                          size_t len);
void cxrl_generator_free(CxrlGenerator *gen);

/* Runs the command-line driver; returns its exit code. */
int cxrl_run_cli(int argc, const char *const *argv);

#ifdef __cplusplus
}
#endif

#endif /* CXRL_H */
