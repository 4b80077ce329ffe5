#ifndef TAXIPLACE_H
#define TAXIPLACE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum TpStatus {
  TP_STATUS_OK = 0,
  TP_STATUS_NULL_POINTER = 1,
  TP_STATUS_CONFIG = 2,
  TP_STATUS_DATA = 3,
  TP_STATUS_NUMERIC = 4,
  TP_STATUS_IO = 5,
  TP_STATUS_PROVIDER = 6,
  TP_STATUS_INVALID_ARGUMENT = 7,
  TP_STATUS_PANIC = 8,
} TpStatus;

/**
 * Opaque handle to a recommender loaded from a run directory.
 */
typedef struct TpRecommender TpRecommender;

/**
 * One ranked hotspot.
 */
typedef struct TpRankedHotspot {
  uint32_t rank;
  uint32_t hotspot;
  double lat;
  double lon;
  double q_value;
  double distance_km;
  double congestion;
} TpRankedHotspot;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *tp_version(void);

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call into this library on the same
 * thread.
 */
const char *tp_last_error_message(void);

/**
 * Great-circle distance in kilometres.
 *
 * # Safety
 * `out_km` must be null or valid for a write of one `double`.
 */
enum TpStatus tp_haversine_km(double lat1, double lon1, double lat2, double lon2, double *out_km);

/**
 * Runs every pipeline stage. `config_path` may be null for defaults;
 * `out_dir`, when non-null, overrides the configured run directory.
 *
 * # Safety
 * Both pointers must be null or NUL-terminated strings.
 */
enum TpStatus tp_run_pipeline(const char *config_path, const char *out_dir);

/**
 * Loads the trained GNN+RL recommender from a run directory. On success
 * `*out` owns a handle to release with [`tp_recommender_free`].
 *
 * # Safety
 * `run_dir` must be a NUL-terminated string and `out` valid for one pointer
 * write.
 */
enum TpStatus tp_recommender_open(const char *run_dir, struct TpRecommender **out);

/**
 * Ranks up to `min(top_k, capacity)` hotspots for a user at hour `t_of_day`
 * and writes them to `out`. `*written` receives the count.
 *
 * # Safety
 * `handle` must come from [`tp_recommender_open`]; `out` must be valid for
 * `capacity` writes; `written` must be valid for one write.
 */
enum TpStatus tp_recommend(const struct TpRecommender *handle,
                           double lat,
                           double lon,
                           double t_of_day,
                           size_t top_k,
                           struct TpRankedHotspot *out,
                           size_t capacity,
                           size_t *written);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `handle` must be null or come from [`tp_recommender_open`] and not have
 * been freed.
 */
void tp_recommender_free(struct TpRecommender *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TAXIPLACE_H */
