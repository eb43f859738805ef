#ifndef OAK_H
#define OAK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum OakStatus {
  OakStatus_Ok = 0,
  OakStatus_NullArgument = 1,
  OakStatus_InvalidUtf8 = 2,
  OakStatus_InvalidArgument = 3,
  OakStatus_InsufficientAnchors = 4,
  OakStatus_DegenerateGeometry = 5,
  OakStatus_NoFeasibleWorker = 6,
  OakStatus_ParseError = 7,
  OakStatus_IoError = 8,
  OakStatus_InternalError = 9,
} OakStatus;

/**
 * Worker selection strategy for `oak_select_worker`.
 */
typedef enum OakSelectStrategy {
  /**
   * Most remaining cpu+memory slack, ties by lowest index.
   */
  OakSelectStrategy_BestSlack = 0,
  /**
   * First worker, in input order, that fits.
   */
  OakSelectStrategy_FirstFit = 1,
} OakSelectStrategy;

/**
 * Opaque network coordinate handle.
 */
typedef struct OakCoord OakCoord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Detail text for the most recent failure on this thread, or NULL.
 * Valid until the next failing call on the same thread.
 */
const char *oak_last_error(void);

const char *oak_version(void);

/**
 * Great-circle distance in km between two latitude/longitude pairs
 * given in degrees.
 */
enum OakStatus oak_dist_gc(double lat1, double lon1, double lat2, double lon2, double *out_km);

/**
 * New coordinate at the origin of a `dims`-dimensional space.
 * Returns NULL when `dims` is zero. Free with `oak_coord_free`.
 */
struct OakCoord *oak_coord_new(uintptr_t dims);

/**
 * New coordinate at an explicit position.
 */
struct OakCoord *oak_coord_at(const double *position, uintptr_t dims);

void oak_coord_free(struct OakCoord *coord);

/**
 * Copy the coordinate's position into `out`, which must hold `dims`
 * doubles (as passed at construction).
 */
enum OakStatus oak_coord_position(const struct OakCoord *coord, double *out, uintptr_t dims);

/**
 * Predicted RTT in ms between two coordinates.
 */
enum OakStatus oak_coord_distance(const struct OakCoord *a,
                                  const struct OakCoord *b,
                                  double *out_ms);

/**
 * Fold one RTT measurement against a peer into the coordinate,
 * moving it in place. `tie_seed` breaks the co-located-nodes tie
 * deterministically; any value works, vary it across calls.
 */
enum OakStatus oak_coord_update(struct OakCoord *coord,
                                const struct OakCoord *peer,
                                double rtt_ms,
                                uint64_t tie_seed);

/**
 * Estimate an unknown point from `count` anchors. `anchors` is a
 * row-major `count * dims` array of anchor positions, `rtts_ms` the
 * measured distance to each. Writes `dims` doubles to `out_position`.
 */
enum OakStatus oak_trilaterate(const double *anchors,
                               const double *rtts_ms,
                               uintptr_t count,
                               uintptr_t dims,
                               double *out_position);

/**
 * Pick a worker for a (cpu, memory) request. `free_cpu` and
 * `free_memory_mb` describe the remaining capacity of `count`
 * workers; the chosen index lands in `out_index`.
 */
enum OakStatus oak_select_worker(const double *free_cpu,
                                 const uint64_t *free_memory_mb,
                                 uintptr_t count,
                                 double need_cpu,
                                 uint64_t need_memory_mb,
                                 enum OakSelectStrategy strategy,
                                 uintptr_t *out_index);

/**
 * Parse and validate a deployment descriptor document. Returns Ok when
 * the document is well-formed and convertible to a service.
 */
enum OakStatus oak_sla_validate(const char *json);

/**
 * Run a simulation scenario, writing metric CSVs under `out_dir`.
 * On success `*out_report_json` holds a JSON run report owned by the
 * library; release it with `oak_string_free`.
 */
enum OakStatus oak_sim_run(const char *scenario_json, const char *out_dir, char **out_report_json);

/**
 * Release a string returned by this library.
 */
void oak_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OAK_H */
