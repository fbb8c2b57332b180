#include <gtest/gtest.h>

#include "siglass/model_ir.hpp"
#include "siglass/tensor_io.hpp"
#include "support/nets.hpp"

using namespace siglass;

namespace {

Json relu_doc() {
  return Json::parse(R"({
    "ir_version": 1,
    "inputs": [{"name": "x", "shape": [1, 4]}],
    "outputs": [{"name": "y", "shape": [1, 4]}],
    "initializers": [],
    "nodes": [{"name": "r", "op_type": "Relu", "inputs": ["x"], "outputs": ["y"], "attrs": {}}]
  })");
}

template <class F>
ErrorKind error_kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorKind::Io;
}

}  // namespace

TEST(Tensor, DataLengthMustMatchShape) {
  EXPECT_EQ(error_kind_of([] { Tensor({2, 3}, std::vector<double>(5)); }), ErrorKind::ShapeMismatch);
  Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
}

TEST(TensorIo, Base64MatchesLittleEndianFloat64Bytes) {
  // Reference string from Python: base64(struct.pack('<3d', 1.0, -2.5, 0.1)).
  EXPECT_EQ(encode_f64_base64({1.0, -2.5, 0.1}), "AAAAAAAA8D8AAAAAAAAEwJqZmZmZmbk/");
  const auto back = decode_f64_base64("AAAAAAAA8D8AAAAAAAAEwJqZmZmZmbk/");
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back[0], 1.0);
  EXPECT_EQ(back[1], -2.5);
  EXPECT_EQ(back[2], 0.1);
}

TEST(TensorIo, Base64RoundTripIsBitExact) {
  std::mt19937_64 rng(3);
  for (int n : {0, 1, 2, 3, 7, 64}) {
    const auto t = test_nets::random_tensor({n}, rng, 1e3);
    EXPECT_EQ(decode_f64_base64(encode_f64_base64(t.data)), t.data);
  }
}

TEST(TensorIo, RejectsBadBase64) {
  EXPECT_THROW(decode_f64_base64("AAAA$AAA"), Error);
  EXPECT_THROW(decode_f64_base64("AAAAAAAA"), Error);  // 6 bytes, not a multiple of 8
}

TEST(TensorIo, AcceptsNestedAndFlatData) {
  const auto nested = tensor_from_json(Json::parse(R"({"shape": [2, 2], "data": [[1, 2], [3, 4]]})"));
  const auto flat = tensor_from_json(Json::parse(R"({"shape": [2, 2], "data": [1, 2, 3, 4]})"));
  EXPECT_EQ(nested, flat);
  EXPECT_EQ(flat.data, (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(tensor_from_json(tensor_to_json(flat, true)), flat);
}

TEST(TensorIo, RejectsNonPositiveDims) {
  EXPECT_EQ(error_kind_of([] { tensor_from_json(Json::parse(R"({"shape": [0, 2], "data": []})")); }),
            ErrorKind::MalformedDocument);
}

TEST(TensorIo, MissingFileNamesThePath) {
  try {
    read_tensor_file("/nonexistent/dir/x.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/x.json"), std::string::npos);
  }
}

TEST(ParseModel, SingleReluNode) {
  const auto g = parse_model(relu_doc());
  ASSERT_EQ(g.nodes.size(), 1u);
  EXPECT_EQ(g.nodes[0].op, OpType::Relu);
  EXPECT_EQ(g.shape_of("y"), (Shape{1, 4}));
}

TEST(ParseModel, UnknownOperatorNamesEveryOffendingNode) {
  auto doc = relu_doc();
  doc["nodes"] = Json::parse(R"([
    {"name": "e1", "op_type": "Exp", "inputs": ["x"], "outputs": ["a"]},
    {"name": "t1", "op_type": "Tanh", "inputs": ["a"], "outputs": ["y"]}])");
  try {
    parse_model(doc);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::UnsupportedOperator);
    EXPECT_EQ(e.subjects(), (std::vector<std::string>{"e1", "t1"}));
  }
}

TEST(ParseModel, ConvOutputShape) {
  // (8 + 2*1 - 3) / 1 + 1 = 8 per spatial dim.
  const auto g = test_nets::NetBuilder({1, 1, 8, 8}, 1).conv(2, 3).build();
  EXPECT_EQ(g.shape_of(g.outputs[0].name), (Shape{1, 2, 8, 8}));
}

TEST(ParseModel, StridedConvAndPoolShapes) {
  auto doc = Json::parse(R"({
    "ir_version": 1,
    "inputs": [{"name": "x", "shape": [1, 1, 9, 7]}],
    "outputs": [{"name": "p"}],
    "initializers": [{"name": "w", "shape": [3, 1, 3, 3], "data": [0,0,0,0,1,0,0,0,0, 0,0,0,0,1,0,0,0,0, 0,0,0,0,1,0,0,0,0]}],
    "nodes": [
      {"name": "c", "op_type": "Conv", "inputs": ["x", "w"], "outputs": ["h"],
       "attrs": {"kernel_shape": [3, 3], "strides": [2, 2], "pads": [1, 1, 1, 1]}},
      {"name": "m", "op_type": "MaxPool", "inputs": ["h"], "outputs": ["p"],
       "attrs": {"kernel_shape": [2, 2], "strides": [1, 1]}}]
  })");
  const auto g = parse_model(doc);
  // Conv: floor((9 + 2 - 3) / 2) + 1 = 5, floor((7 + 2 - 3) / 2) + 1 = 4. Pool: 4, 3.
  EXPECT_EQ(g.shape_of("h"), (Shape{1, 3, 5, 4}));
  EXPECT_EQ(g.shape_of("p"), (Shape{1, 3, 4, 3}));
}

TEST(ParseModel, ConvTransposeShape) {
  const auto g = test_nets::NetBuilder({1, 2, 4, 4}, 1).conv_transpose(3).build();
  EXPECT_EQ(g.shape_of(g.outputs[0].name), (Shape{1, 3, 8, 8}));
}

TEST(ParseModel, CycleIsRejected) {
  auto doc = relu_doc();
  doc["nodes"] = Json::parse(R"([
    {"name": "a", "op_type": "Add", "inputs": ["x", "b_out"], "outputs": ["a_out"]},
    {"name": "b", "op_type": "Relu", "inputs": ["a_out"], "outputs": ["b_out"]},
    {"name": "c", "op_type": "Relu", "inputs": ["b_out"], "outputs": ["y"]}])");
  try {
    parse_model(doc);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::CyclicGraph);
  }
}

TEST(ParseModel, NodesAreReorderedTopologically) {
  auto doc = relu_doc();
  doc["nodes"] = Json::parse(R"([
    {"name": "second", "op_type": "Neg", "inputs": ["h"], "outputs": ["y"]},
    {"name": "first", "op_type": "Relu", "inputs": ["x"], "outputs": ["h"]}])");
  const auto g = parse_model(doc);
  ASSERT_EQ(g.nodes.size(), 2u);
  EXPECT_EQ(g.nodes[0].name, "first");
  EXPECT_EQ(g.nodes[1].name, "second");
}

TEST(ParseModel, DeclaredOutputShapeMismatchNamesTheEdge) {
  auto doc = relu_doc();
  doc["outputs"][0]["shape"] = {1, 5};
  try {
    parse_model(doc);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
    EXPECT_EQ(e.subjects(), std::vector<std::string>{"y"});
  }
}

TEST(ParseModel, BroadcastMismatchIsShapeError) {
  auto doc = relu_doc();
  doc["initializers"] = Json::parse(R"([{"name": "c", "shape": [3], "data": [1, 2, 3]}])");
  doc["nodes"] = Json::parse(R"([{"name": "a", "op_type": "Add", "inputs": ["x", "c"], "outputs": ["y"]}])");
  EXPECT_EQ(error_kind_of([&] { parse_model(doc); }), ErrorKind::ShapeMismatch);
}

TEST(ParseModel, MalformedDocuments) {
  EXPECT_EQ(error_kind_of([] { parse_model(Json::parse("[]")); }), ErrorKind::MalformedDocument);
  auto doc = relu_doc();
  doc["ir_version"] = 2;
  EXPECT_EQ(error_kind_of([&] { parse_model(doc); }), ErrorKind::MalformedDocument);
  doc = relu_doc();
  doc["nodes"][0]["inputs"] = {"missing"};
  EXPECT_EQ(error_kind_of([&] { parse_model(doc); }), ErrorKind::MalformedDocument);
  EXPECT_EQ(error_kind_of([] { parse_model(std::string("{not json")); }), ErrorKind::MalformedDocument);
}

TEST(ParseModel, InteriorSigmoidIsRejected) {
  auto doc = relu_doc();
  doc["nodes"] = Json::parse(R"([
    {"name": "s", "op_type": "Sigmoid", "inputs": ["x"], "outputs": ["h"]},
    {"name": "r", "op_type": "Relu", "inputs": ["h"], "outputs": ["y"]}])");
  try {
    parse_model(doc);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::UnsupportedOperator);
    EXPECT_EQ(e.subjects(), std::vector<std::string>{"s"});
  }
}

TEST(ParseModel, AutoPadIsRejected) {
  auto doc = test_nets::NetBuilder({1, 1, 4, 4}, 1).conv(1).json();
  doc["nodes"][0]["attrs"]["auto_pad"] = "SAME_UPPER";
  EXPECT_THROW(parse_model(doc), Error);
}

TEST(ParseModel, DynamicConvWeightsAreRejected) {
  auto doc = Json::parse(R"({
    "ir_version": 1,
    "inputs": [{"name": "x", "shape": [1, 1, 4, 4]}, {"name": "w", "shape": [1, 1, 3, 3]}],
    "outputs": [{"name": "y"}],
    "nodes": [{"name": "c", "op_type": "Conv", "inputs": ["x", "w"], "outputs": ["y"],
               "attrs": {"kernel_shape": [3, 3]}}]
  })");
  EXPECT_EQ(error_kind_of([&] { parse_model(doc); }), ErrorKind::UnsupportedOperator);
}

TEST(ParseModel, StaticSubgraphsAreFolded) {
  auto doc = Json::parse(R"({
    "ir_version": 1,
    "inputs": [{"name": "x", "shape": [2]}],
    "outputs": [{"name": "y"}],
    "initializers": [{"name": "c", "shape": [2], "data": [-1, 2]}],
    "nodes": [
      {"name": "rc", "op_type": "Relu", "inputs": ["c"], "outputs": ["rc_out"]},
      {"name": "add", "op_type": "Add", "inputs": ["x", "rc_out"], "outputs": ["y"]}]
  })");
  const auto g = parse_model(doc);
  EXPECT_TRUE(g.is_static("rc_out"));
  EXPECT_EQ(g.constant("rc_out").data, (std::vector<double>{0, 2}));
}

TEST(ParseModel, SerializeRoundTrip) {
  for (bool b64 : {true, false}) {
    const auto g = test_nets::NetBuilder({1, 1, 8, 8}, 5).conv(3).relu().max_pool().upsample().conv(1).build();
    const auto again = parse_model(serialize_model(g, b64));
    ASSERT_EQ(again.nodes.size(), g.nodes.size());
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
      EXPECT_EQ(again.nodes[i].name, g.nodes[i].name);
      EXPECT_EQ(again.nodes[i].op, g.nodes[i].op);
      EXPECT_EQ(again.nodes[i].inputs, g.nodes[i].inputs);
      EXPECT_EQ(again.nodes[i].attrs, g.nodes[i].attrs);
    }
    EXPECT_EQ(again.initializers, g.initializers);
    EXPECT_EQ(again.shapes, g.shapes);
  }
}
