#pragma once

// Remote text-to-3D shape source: posts the shape prompt to an endpoint and
// converts its point response. Separate header to confine httplib.

#include <string>

// Eigen must be fully parsed before httplib drags in <resolv.h>, whose _res
// macro rewrites ordinary parameter names inside later-included headers.
#include "conceptsplat/pointcloud.hpp"

#include <httplib.h>
#include <json.hpp>

#ifdef _res
#undef _res // glibc resolver-state compat macro; we never touch the res_* API
#endif

namespace csplat {

// POST /shape {"prompt", "count", "seed"} -> {"points": [[x,y,z,r,g,b], ...]}
// with color channels in [0,1].
class HttpShapeGenerator final : public ShapeGenerator {
public:
    explicit HttpShapeGenerator(std::string base_url, int points = 1024)
        : base_url_(std::move(base_url)), points_(points)
    {
    }

    PointCloud generate(const std::string& prompt, std::uint64_t seed) override
    {
        httplib::Client client(base_url_);
        client.set_connection_timeout(5, 0);
        client.set_read_timeout(60, 0);
        nlohmann::ordered_json req;
        req["prompt"] = prompt;
        req["count"] = points_;
        req["seed"] = seed;
        auto res = client.Post("/shape", req.dump(), "application/json");
        if (!res) throw TransportError("shape endpoint unreachable: " + base_url_);
        if (res->status != 200)
            throw TransportError("shape endpoint returned status " + std::to_string(res->status));

        nlohmann::json root;
        try {
            root = nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(std::string("shape response: ") + e.what());
        }
        if (!root.contains("points") || !root["points"].is_array())
            throw ParseError("shape response: expected a 'points' array");
        PointCloud cloud;
        cloud.provenance = CloudProvenance::external;
        for (const auto& row : root["points"]) {
            if (!row.is_array() || row.size() < 3)
                throw ParseError("shape response: point rows need at least x,y,z");
            ColoredPoint pt;
            pt.p = Vec3(row[0].get<double>(), row[1].get<double>(), row[2].get<double>());
            if (row.size() >= 6)
                pt.color = Vec3(row[3].get<double>(), row[4].get<double>(), row[5].get<double>());
            cloud.points.push_back(pt);
        }
        cloud.validate();
        return cloud;
    }

private:
    std::string base_url_;
    int points_;
};

} // namespace csplat
