public class ServerNodeFactory {
    public void configure(ServerNode.Builder builder, String ip) {
        builder.withIp(ip);
    }
}
