#include "ctxr/gzio.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <sstream>

#include "ctxr/common.hpp"

namespace ctxr {

namespace {

bool has_gz_suffix(const std::string& path) {
    return path.size() >= 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
}

std::string gzip_compress(const std::string& in) {
    z_stream zs{};
    // windowBits 15 + 16 selects the gzip wrapper
    if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
        throw IoError("gzip: deflateInit2 failed");
    }
    zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
    zs.avail_in = static_cast<uInt>(in.size());
    std::string out;
    std::vector<char> buf(1 << 16);
    int ret = Z_OK;
    do {
        zs.next_out = reinterpret_cast<Bytef*>(buf.data());
        zs.avail_out = static_cast<uInt>(buf.size());
        ret = deflate(&zs, Z_FINISH);
        out.append(buf.data(), buf.size() - zs.avail_out);
    } while (ret == Z_OK);
    deflateEnd(&zs);
    if (ret != Z_STREAM_END) {
        throw IoError("gzip: deflate failed");
    }
    return out;
}

std::string gzip_decompress(const std::string& in) {
    z_stream zs{};
    // windowBits 15 + 32 accepts both zlib and gzip framing
    if (inflateInit2(&zs, 15 + 32) != Z_OK) {
        throw IoError("gzip: inflateInit2 failed");
    }
    zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
    zs.avail_in = static_cast<uInt>(in.size());
    std::string out;
    std::vector<char> buf(1 << 16);
    int ret = Z_OK;
    do {
        zs.next_out = reinterpret_cast<Bytef*>(buf.data());
        zs.avail_out = static_cast<uInt>(buf.size());
        ret = inflate(&zs, Z_NO_FLUSH);
        if (ret != Z_OK && ret != Z_STREAM_END) {
            inflateEnd(&zs);
            throw IoError("gzip: corrupt stream");
        }
        out.append(buf.data(), buf.size() - zs.avail_out);
    } while (ret != Z_STREAM_END);
    inflateEnd(&zs);
    return out;
}

}  // namespace

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open for writing: " + path);
    }
    if (has_gz_suffix(path)) {
        const std::string packed = gzip_compress(content);
        f.write(packed.data(), static_cast<std::streamsize>(packed.size()));
    } else {
        f.write(content.data(), static_cast<std::streamsize>(content.size()));
    }
    if (!f) {
        throw IoError("write failed: " + path);
    }
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open: " + path);
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    std::string raw = ss.str();
    if (raw.size() >= 2 && static_cast<unsigned char>(raw[0]) == 0x1f &&
        static_cast<unsigned char>(raw[1]) == 0x8b) {
        return gzip_decompress(raw);
    }
    return raw;
}

std::vector<std::string> read_lines(const std::string& path) {
    const std::string text = read_text_file(path);
    std::vector<std::string> lines;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) {
            nl = text.size();
        }
        if (nl > pos) {
            lines.emplace_back(text.substr(pos, nl - pos));
        }
        pos = nl + 1;
    }
    return lines;
}

std::uint64_t fnv1a64_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open: " + path);
    }
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (f) {
        f.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<std::size_t>(f.gcount()), h);
    }
    return h;
}

}  // namespace ctxr
