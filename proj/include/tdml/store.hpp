#pragma once

#include "tdml/bytes.hpp"
#include "tdml/ledger.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace tdml::store {

/// Content identifier: hex digest of the stored bytes.
struct Cid {
    std::string hex;

    friend bool operator==(const Cid&, const Cid&) = default;
    friend auto operator<=>(const Cid&, const Cid&) = default;
};

Cid cid_of(ByteView blob);

/// In-memory content-addressed blob store with optional flat-directory spill.
class BlobStore {
public:
    Cid put(ByteView blob, bool test = false);
    Bytes get(const Cid& cid) const;
    bool contains(const Cid& cid) const;
    bool erase(const Cid& cid);
    std::size_t size() const { return blobs_.size(); }
    bool is_test(const Cid& cid) const;

    /// Writes one `<hex>.blob` file per entry into `dir` (created if missing).
    void spill(const std::filesystem::path& dir) const;
    /// Loads every `<hex>.blob` in `dir`; the file name must match the content digest.
    static BlobStore load_dir(const std::filesystem::path& dir);

private:
    std::map<std::string, Bytes> blobs_;
    std::map<std::string, bool> test_flags_;
};

/// Row-major sample matrix with integer class labels.
struct Dataset {
    std::uint32_t dim = 0;
    std::uint32_t num_classes = 0;
    std::vector<float> features;
    std::vector<std::uint32_t> labels;

    std::size_t size() const { return labels.size(); }
};

struct Batch {
    std::uint32_t batch_index = 0;
    std::uint32_t dim = 0;
    std::uint32_t num_classes = 0;
    std::vector<float> features;
    std::vector<std::uint32_t> labels;

    std::size_t rows() const { return labels.size(); }
};

/// 16-byte header (rows, cols, batch index, classes) then f32 features and u32 labels.
Bytes encode_batch(const Batch& batch);
Batch decode_batch(ByteView raw);

/// Seeded shuffle, ceil(n / batch_size) batches, each sealed under `job_key_id` and stored.
/// Returns CIDs in batch order. Throws EmptyDataset / InvalidArgument.
std::vector<Cid> batch_dataset(const Dataset& data, std::size_t batch_size, std::uint64_t seed,
                               ledger::KeyRing& keys, const std::string& job_key_id,
                               BlobStore& store);

/// Loads a sealed batch by CID and decodes it.
Batch load_batch(const BlobStore& store, const Cid& cid, const ledger::KeyRing& keys);

/// Contiguous chunks of the batch list; the first n % parts chunks get one extra.
std::vector<std::vector<Cid>> split_batches(const std::vector<Cid>& cids, std::size_t parts);

struct BlobSpec {
    std::uint32_t n_train = 4000;
    std::uint32_t n_test = 1000;
    std::uint32_t dim = 16;
    std::uint32_t classes = 4;
    double separation = 1.0; // std-dev of class centres, in units of the sample noise
};

/// Seeded Gaussian blobs; balanced classes; features rounded to f32.
std::pair<Dataset, Dataset> make_gaussian_blobs(const BlobSpec& spec, std::uint64_t seed);

/// Whole dataset as one batch (used for the test set blob).
Batch as_batch(const Dataset& data, std::uint32_t batch_index = 0);
Dataset to_dataset(const Batch& batch);

} // namespace tdml::store
