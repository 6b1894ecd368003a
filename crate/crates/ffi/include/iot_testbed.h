#ifndef IOT_TESTBED_H
#define IOT_TESTBED_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum TbStatus {
  TB_STATUS_OK = 0,
  TB_STATUS_NULL_ARGUMENT = 1,
  TB_STATUS_INVALID_ARGUMENT = 2,
  TB_STATUS_IO = 3,
  TB_STATUS_LOCKED = 4,
  TB_STATUS_READ_ONLY = 5,
  TB_STATUS_UNKNOWN_STREAM = 6,
  TB_STATUS_CORRUPT = 7,
  TB_STATUS_INVALID_SPEC = 8,
  TB_STATUS_UNKNOWN_SENSOR = 9,
  TB_STATUS_INVALID_PAYLOAD = 10,
  TB_STATUS_PANIC = 11,
} TbStatus;

// An open event log.
typedef struct TbLog TbLog;

// An in-memory store.
typedef struct TbStore TbStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Valid until
// the next call into this library from the same thread.
const char *tb_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void tb_string_free(char *s);

// Library version as a static string.
const char *tb_version(void);

uint64_t tb_fnv1a64(const uint8_t *key, size_t key_len);

// # Safety
// `key` must point to `key_len` readable bytes; `out` must be writable.
enum TbStatus tb_partition_for_key(const uint8_t *key,
                                   size_t key_len,
                                   uint32_t partition_count,
                                   uint32_t *out);

// MQTT topic filter matching.
//
// # Safety
// `filter` and `topic` must be NUL-terminated; `out` must be writable.
enum TbStatus tb_topic_matches(const char *filter, const char *topic, bool *out);

// Validates a `traffic` or `lighting` payload and returns its canonical
// encoding.
//
// # Safety
// `use_case` must be NUL-terminated, `payload` must point to `len`
// readable bytes and `out_json` must be writable.
enum TbStatus tb_payload_canonicalize(const char *use_case,
                                      const uint8_t *payload,
                                      size_t len,
                                      char **out_json);

// Opens (creating if needed) a log directory for writing. Fails with
// `Locked` if another writer holds it.
//
// # Safety
// `dir` must be NUL-terminated and `out` writable.
enum TbStatus tb_log_open(const char *dir, uint32_t default_partitions, struct TbLog **out);

// Opens an existing log read-only alongside a writer in another process.
//
// # Safety
// `dir` must be NUL-terminated and `out` writable.
enum TbStatus tb_log_open_follower(const char *dir, struct TbLog **out);

// Picks up records appended by the writer since the last call.
//
// # Safety
// `log` must be a live handle.
enum TbStatus tb_log_refresh(const struct TbLog *log);

// # Safety
// `log` must come from `tb_log_open*` and not be used afterwards.
void tb_log_close(struct TbLog *log);

// # Safety
// `log` must be a live handle and `stream` NUL-terminated.
enum TbStatus tb_log_ensure_stream(const struct TbLog *log, const char *stream);

// Appends one record durably and reports where it landed.
//
// # Safety
// Pointers must be valid for the given lengths; out-parameters may be
// null if not wanted.
enum TbStatus tb_log_append(const struct TbLog *log,
                            const char *stream,
                            const uint8_t *key,
                            size_t key_len,
                            const uint8_t *value,
                            size_t value_len,
                            uint32_t *out_partition,
                            uint64_t *out_offset);

// # Safety
// `log` must be a live handle, `stream` NUL-terminated, `out` writable.
enum TbStatus tb_log_partition_count(const struct TbLog *log, const char *stream, uint32_t *out);

// # Safety
// `log` must be a live handle, `stream` NUL-terminated, `out` writable.
enum TbStatus tb_log_high_watermark(const struct TbLog *log,
                                    const char *stream,
                                    uint32_t partition,
                                    uint64_t *out);

// Reads up to `max` records from `from` as a JSON array of
// `{"offset", "key", "value", "ingest_ts"}`; key and value are decoded
// as UTF-8 with replacement.
//
// # Safety
// `log` must be a live handle, `stream` NUL-terminated, `out_json`
// writable.
enum TbStatus tb_log_read_json(const struct TbLog *log,
                               const char *stream,
                               uint32_t partition,
                               uint64_t from,
                               size_t max,
                               char **out_json);

// # Safety
// `out` must be writable.
enum TbStatus tb_store_new(double power_w, struct TbStore **out);

// Loads the snapshot in `data_dir`, or an empty store if there is none.
//
// # Safety
// `data_dir` must be NUL-terminated and `out` writable.
enum TbStatus tb_store_load(const char *data_dir, double power_w, struct TbStore **out);

// # Safety
// `store` must come from `tb_store_*` and not be used afterwards.
void tb_store_free(struct TbStore *store);

// Ingests every record the store has not yet seen. Does not commit a
// consumer group.
//
// # Safety
// Handles must be live; `out_inserted` may be null.
enum TbStatus tb_store_consume(const struct TbStore *store,
                               const struct TbLog *log,
                               uint64_t *out_inserted);

// # Safety
// `store` must be live; out-parameters may be null.
enum TbStatus tb_store_row_counts(const struct TbStore *store,
                                  uint64_t *out_traffic,
                                  uint64_t *out_lighting);

// Traffic series for a query string in the HTTP API's format, e.g.
// `from=2017-03-01&group_by=sensor`. Returns the same JSON body.
//
// # Safety
// `store` must be live, `query` NUL-terminated, `out_json` writable.
enum TbStatus tb_store_query_traffic(const struct TbStore *store,
                                     const char *query,
                                     char **out_json);

// Energy series; query string as for `/api/lighting/energy`.
//
// # Safety
// `store` must be live, `query` NUL-terminated, `out_json` writable.
enum TbStatus tb_store_query_energy(const struct TbStore *store,
                                    const char *query,
                                    char **out_json);

// Energy totals; query string as for `/api/lighting/total`.
//
// # Safety
// `store` must be live, `query` NUL-terminated, `out_json` writable.
enum TbStatus tb_store_query_energy_total(const struct TbStore *store,
                                          const char *query,
                                          char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IOT_TESTBED_H */
