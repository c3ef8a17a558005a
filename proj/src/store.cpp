#include "tdml/store.hpp"

#include "tdml/digest.hpp"
#include "tdml/error.hpp"
#include "tdml/rng.hpp"

#include <fstream>
#include <iterator>
#include <numeric>

namespace tdml::store {

Cid cid_of(ByteView blob) { return Cid{sha256(blob).hex()}; }

Cid BlobStore::put(ByteView blob, bool test) {
    auto cid = cid_of(blob);
    blobs_.try_emplace(cid.hex, blob.begin(), blob.end());
    if (test) test_flags_[cid.hex] = true;
    return cid;
}

Bytes BlobStore::get(const Cid& cid) const {
    auto it = blobs_.find(cid.hex);
    if (it == blobs_.end()) throw Error(ErrorCode::NotFound, "cid " + cid.hex);
    return it->second;
}

bool BlobStore::contains(const Cid& cid) const { return blobs_.count(cid.hex) != 0; }

bool BlobStore::erase(const Cid& cid) {
    test_flags_.erase(cid.hex);
    return blobs_.erase(cid.hex) != 0;
}

bool BlobStore::is_test(const Cid& cid) const {
    auto it = test_flags_.find(cid.hex);
    return it != test_flags_.end() && it->second;
}

void BlobStore::spill(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    for (const auto& [hex, blob] : blobs_) {
        std::ofstream out(dir / (hex + ".blob"), std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
        if (!out) throw Error(ErrorCode::InvalidArgument, "cannot write blob " + hex);
    }
}

BlobStore BlobStore::load_dir(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw Error(ErrorCode::NotFound, "blob dir " + dir.string());
    BlobStore store;
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".blob") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& path : files) {
        std::ifstream in(path, std::ios::binary);
        Bytes blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        auto cid = store.put(blob);
        if (cid.hex + ".blob" != path.filename().string()) {
            throw Error(ErrorCode::DecodeError, "blob content does not match name " + path.filename().string());
        }
    }
    return store;
}

Bytes encode_batch(const Batch& batch) {
    const auto rows = static_cast<std::uint32_t>(batch.rows());
    if (batch.features.size() != static_cast<std::size_t>(rows) * batch.dim) {
        throw Error(ErrorCode::ShapeMismatch, "batch features do not match rows x dim");
    }
    ByteWriter w;
    w.u32(rows);
    w.u32(batch.dim);
    w.u32(batch.batch_index);
    w.u32(batch.num_classes);
    for (float f : batch.features) w.f32(f);
    for (auto l : batch.labels) w.u32(l);
    return std::move(w).take();
}

Batch decode_batch(ByteView raw) {
    ByteReader r(raw);
    Batch b;
    const auto rows = r.u32();
    b.dim = r.u32();
    b.batch_index = r.u32();
    b.num_classes = r.u32();
    const std::size_t n = static_cast<std::size_t>(rows) * b.dim;
    if (r.remaining() != n * 4 + static_cast<std::size_t>(rows) * 4) {
        throw Error(ErrorCode::DecodeError, "batch payload size");
    }
    b.features.resize(n);
    for (auto& f : b.features) f = r.f32();
    b.labels.resize(rows);
    for (auto& l : b.labels) {
        l = r.u32();
        if (l >= b.num_classes) throw Error(ErrorCode::DecodeError, "label out of range");
    }
    return b;
}

std::vector<Cid> batch_dataset(const Dataset& data, std::size_t batch_size, std::uint64_t seed,
                               ledger::KeyRing& keys, const std::string& job_key_id,
                               BlobStore& store) {
    if (data.size() == 0) throw Error(ErrorCode::EmptyDataset, "batch_dataset");
    if (batch_size == 0) throw Error(ErrorCode::InvalidArgument, "batch_size must be >= 1");

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "batch-shuffle"));
    rng.shuffle(order);

    std::vector<Cid> cids;
    for (std::size_t start = 0, idx = 0; start < order.size(); start += batch_size, ++idx) {
        const std::size_t end = std::min(order.size(), start + batch_size);
        Batch b;
        b.batch_index = static_cast<std::uint32_t>(idx);
        b.dim = data.dim;
        b.num_classes = data.num_classes;
        for (std::size_t k = start; k < end; ++k) {
            const auto row = order[k];
            auto first = data.features.begin() + static_cast<std::ptrdiff_t>(row * data.dim);
            b.features.insert(b.features.end(), first, first + data.dim);
            b.labels.push_back(data.labels[row]);
        }
        auto sealed = keys.seal(job_key_id, encode_batch(b));
        cids.push_back(store.put(sealed));
    }
    return cids;
}

Batch load_batch(const BlobStore& store, const Cid& cid, const ledger::KeyRing& keys) {
    return decode_batch(keys.open(store.get(cid)));
}

std::vector<std::vector<Cid>> split_batches(const std::vector<Cid>& cids, std::size_t parts) {
    if (parts == 0) throw Error(ErrorCode::InvalidArgument, "split into zero parts");
    std::vector<std::vector<Cid>> out(parts);
    const std::size_t base = cids.size() / parts;
    const std::size_t extra = cids.size() % parts;
    std::size_t pos = 0;
    for (std::size_t p = 0; p < parts; ++p) {
        const std::size_t n = base + (p < extra ? 1 : 0);
        out[p].assign(cids.begin() + static_cast<std::ptrdiff_t>(pos),
                      cids.begin() + static_cast<std::ptrdiff_t>(pos + n));
        pos += n;
    }
    return out;
}

std::pair<Dataset, Dataset> make_gaussian_blobs(const BlobSpec& spec, std::uint64_t seed) {
    if (spec.dim == 0 || spec.classes == 0) throw Error(ErrorCode::InvalidArgument, "blob spec");
    Rng rng(derive_seed(seed, "gaussian-blobs"));
    std::vector<double> centres(static_cast<std::size_t>(spec.classes) * spec.dim);
    for (auto& c : centres) c = spec.separation * rng.normal();

    auto draw = [&](std::uint32_t n) {
        Dataset d;
        d.dim = spec.dim;
        d.num_classes = spec.classes;
        d.features.reserve(static_cast<std::size_t>(n) * spec.dim);
        for (std::uint32_t i = 0; i < n; ++i) {
            const std::uint32_t label = i % spec.classes;
            for (std::uint32_t k = 0; k < spec.dim; ++k) {
                const double x = centres[static_cast<std::size_t>(label) * spec.dim + k] + rng.normal();
                d.features.push_back(static_cast<float>(x));
            }
            d.labels.push_back(label);
        }
        return d;
    };
    auto train = draw(spec.n_train);
    auto test = draw(spec.n_test);
    return {std::move(train), std::move(test)};
}

Batch as_batch(const Dataset& data, std::uint32_t batch_index) {
    Batch b;
    b.batch_index = batch_index;
    b.dim = data.dim;
    b.num_classes = data.num_classes;
    b.features = data.features;
    b.labels = data.labels;
    return b;
}

Dataset to_dataset(const Batch& batch) {
    Dataset d;
    d.dim = batch.dim;
    d.num_classes = batch.num_classes;
    d.features = batch.features;
    d.labels = batch.labels;
    return d;
}

} // namespace tdml::store
